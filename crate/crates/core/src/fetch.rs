//! Download-and-verify for raw dataset files.

use std::io::Read;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable naming the raw-data cache directory.
pub const DATA_DIR_ENV: &str = "CFBENCH_DATA_DIR";

/// One entry of a fetch manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FetchEntry {
    pub name: String,
    pub url: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Resolves the cache directory: explicit flag, then `CFBENCH_DATA_DIR`,
/// then `./data-cache`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("data-cache"),
    }
}

fn file_name_for(url: &str, name: Option<&str>) -> String {
    if let Some(n) = name {
        return n.to_string();
    }
    let trimmed = url.split(['?', '#']).next().unwrap_or(url);
    match trimmed.rsplit('/').next() {
        Some(s) if !s.is_empty() => s.to_string(),
        _ => "download.csv".to_string(),
    }
}

/// Downloads `url` into `cache_dir` and verifies its SHA-256 digest. A
/// cached file whose digest already matches is reused without network
/// access. A mismatching download is not kept.
pub fn fetch_dataset(
    url: &str,
    expected_sha256: &str,
    cache_dir: &Path,
    file_name: Option<&str>,
) -> Result<PathBuf> {
    let expected = expected_sha256.trim().to_ascii_lowercase();
    if expected.len() != 64 || !expected.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(Error::Config(format!(
            "`{expected_sha256}` is not a SHA-256 hex digest"
        )));
    }
    let target = cache_dir.join(file_name_for(url, file_name));
    if target.exists() && sha256_file(&target)? == expected {
        info!("using cached {}", target.display());
        return Ok(target);
    }

    let bytes = download(url)?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(Error::ChecksumMismatch {
            path: target,
            expected,
            actual,
        });
    }
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let tmp = target.with_extension("part");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    info!("fetched {url} -> {}", target.display());
    Ok(target)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let net = |message: String| Error::Network {
        url: url.to_string(),
        message,
    };
    let response = ureq::get(url).call().map_err(|e| net(e.to_string()))?;
    let mut bytes = Vec::new();
    response
        .into_body()
        .into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| net(e.to_string()))?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use std::net::TcpListener;

    fn serve_once(body: &'static [u8]) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 2048];
                let _ = stream.read(&mut buf);
                let head = format!(
                    "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(body);
            }
        });
        format!("http://{addr}/files/toy.csv")
    }

    const BODY: &[u8] = b"a,y\n1,p\n2,q\n";

    #[test]
    fn happy_path_caches_file() {
        let dir = tempfile::tempdir().unwrap();
        let url = serve_once(BODY);
        let digest = sha256_hex(BODY);
        let path = fetch_dataset(&url, &digest, dir.path(), None).unwrap();
        assert_eq!(path, dir.path().join("toy.csv"));
        assert_eq!(std::fs::read(&path).unwrap(), BODY);
        // second call is served from the cache; no server is listening now
        let again = fetch_dataset(&url, &digest, dir.path(), None).unwrap();
        assert_eq!(again, path);
    }

    #[test]
    fn wrong_digest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let url = serve_once(BODY);
        let wrong = "0".repeat(64);
        let err = fetch_dataset(&url, &wrong, dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }));
        assert!(!dir.path().join("toy.csv").exists());
    }

    #[test]
    fn unreachable_url_is_network_error() {
        let dir = tempfile::tempdir().unwrap();
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let url = format!("http://127.0.0.1:{port}/x.csv");
        let err = fetch_dataset(&url, &"a".repeat(64), dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::Network { .. }));
    }

    #[test]
    fn malformed_digest_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            fetch_dataset("http://127.0.0.1:9/x", "xyz", dir.path(), None),
            Err(Error::Config(_))
        ));
    }
}
