use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::NormalizeMode;
use crate::fetch::sha256_hex;
use crate::generators::{ConstraintHooks, Registry};
use crate::metrics::{MetricOptions, ValidityMode};
use crate::model::GridSpec;
use crate::schema::FeatureSchema;

/// Per-stage seeds. All four are required.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub model: u64,
    pub factuals: u64,
    pub generators: u64,
}

impl Seeds {
    pub fn offset(self, by: u64) -> Self {
        Self {
            split: self.split.wrapping_add(by),
            model: self.model.wrapping_add(by),
            factuals: self.factuals.wrapping_add(by),
            generators: self.generators.wrapping_add(by),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Defaults to the schema's name.
    #[serde(default)]
    pub name: Option<String>,
    pub schema: PathBuf,
    /// Local CSV. Either `data` or `url` with `sha256` is required.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub sha256: Option<String>,
    #[serde(default)]
    pub normalize: NormalizeMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Unique instance name used in records and reports.
    pub name: String,
    /// Registered generator kind; defaults to `name`.
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub params: Option<toml::Table>,
    #[serde(default = "yes")]
    pub clamp_range: bool,
    #[serde(default = "yes")]
    pub project_ohe: bool,
    /// Schema columns the generator may not change.
    #[serde(default)]
    pub frozen: Vec<String>,
    #[serde(default)]
    pub budget: Option<usize>,
}

fn yes() -> bool {
    true
}

impl GeneratorConfig {
    pub fn kind(&self) -> &str {
        self.kind.as_deref().unwrap_or(&self.name)
    }

    pub fn params_json(&self) -> serde_json::Value {
        match &self.params {
            Some(t) => serde_json::to_value(t).unwrap_or(serde_json::Value::Null),
            None => serde_json::Value::Null,
        }
    }

    pub fn base_hooks(&self) -> ConstraintHooks {
        ConstraintHooks {
            clamp_range: self.clamp_range,
            project_ohe: self.project_ohe,
            frozen: Vec::new(),
            weights: Vec::new(),
        }
    }
}

fn default_modes() -> Vec<ValidityMode> {
    ValidityMode::ALL.to_vec()
}

fn default_factuals() -> usize {
    10
}

fn default_output() -> PathBuf {
    PathBuf::from("cfbench-out")
}

/// A benchmark run description, usually read from TOML. Relative paths are
/// resolved against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Seeds,
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetConfig>,
    #[serde(rename = "generator")]
    pub generators: Vec<GeneratorConfig>,
    /// Factuals drawn per binary class and dataset.
    #[serde(default = "default_factuals")]
    pub factuals_per_class: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<ValidityMode>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub jobs: Option<usize>,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// SHA-256 of the config text.
    #[serde(skip)]
    pub hash: String,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, Vec<String>> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| vec![e.message().to_string()])?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.hash = sha256_hex(text.as_bytes());
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid.clone().unwrap_or_default()
    }

    /// Problems that would stop a run, checked before any work starts.
    pub fn problems(&self, registry: &Registry) -> Vec<String> {
        let mut errs = Vec::new();
        if self.datasets.is_empty() {
            errs.push("no [[dataset]] entries".to_string());
        }
        if self.generators.is_empty() {
            errs.push("no [[generator]] entries".to_string());
        }
        if self.factuals_per_class == 0 {
            errs.push("factuals_per_class must be positive".to_string());
        }
        if self.jobs == Some(0) {
            errs.push("jobs must be positive".to_string());
        }
        if self.modes.is_empty() {
            errs.push("modes must not be empty".to_string());
        }
        if let Some(g) = &self.grid {
            if g.learning_rates.is_empty() || g.epochs.is_empty() || g.neurons.as_ref().is_some_and(|n| n.is_empty()) {
                errs.push("grid axes must not be empty".to_string());
            }
            if g.neurons.as_ref().is_some_and(|n| n.contains(&0)) {
                errs.push("grid neurons must be positive".to_string());
            }
        }
        let mut columns: HashSet<String> = HashSet::new();
        let mut names = HashSet::new();
        for (i, d) in self.datasets.iter().enumerate() {
            let schema_path = self.resolve(&d.schema);
            match FeatureSchema::from_path(&schema_path) {
                Ok(s) => {
                    let name = d.name.clone().unwrap_or_else(|| s.name.clone());
                    if !names.insert(name.clone()) {
                        errs.push(format!("duplicate dataset name `{name}`"));
                    }
                    columns.extend(s.columns.iter().map(|c| c.name.clone()));
                }
                Err(e) => errs.push(format!("dataset {}: schema: {e}", i + 1)),
            }
            match (&d.data, &d.url, &d.sha256) {
                (Some(p), None, _) => {
                    let p = self.resolve(p);
                    if !p.is_file() {
                        errs.push(format!("dataset {}: data file {} does not exist", i + 1, p.display()));
                    }
                }
                (None, Some(_), Some(_)) => {}
                (None, Some(_), None) => errs.push(format!("dataset {}: url needs a sha256 digest", i + 1)),
                (Some(_), Some(_), _) => errs.push(format!("dataset {}: give either data or url, not both", i + 1)),
                (None, None, _) => errs.push(format!("dataset {}: needs data or url", i + 1)),
            }
        }
        let mut gen_names = HashSet::new();
        for g in &self.generators {
            if !gen_names.insert(g.name.as_str()) {
                errs.push(format!("duplicate generator name `{}`", g.name));
            }
            if !registry.contains(g.kind()) {
                errs.push(format!("generator `{}`: unknown kind `{}`", g.name, g.kind()));
            } else if let Err(e) = registry.build(g.kind(), &g.name, &g.params_json()) {
                errs.push(format!("generator `{}`: {e}", g.name));
            }
            if g.budget == Some(0) {
                errs.push(format!("generator `{}`: budget must be positive", g.name));
            }
            for f in &g.frozen {
                if !columns.contains(f) {
                    errs.push(format!("generator `{}`: frozen column `{f}` is in no dataset", g.name));
                }
            }
        }
        errs
    }
}

/// Reads and checks a run config file; the error lists every problem found.
pub fn validate_config(path: &Path, registry: &Registry) -> Result<RunConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg = RunConfig::from_toml_str(&text, &base)?;
    let errs = cfg.problems(registry);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    fn fixture(dir: &Path) {
        write(
            dir,
            "toy.schema.toml",
            "name = \"toy\"\ntarget = \"y\"\n[[column]]\nname = \"a\"\nkind = \"numeric\"\n[[column]]\nname = \"y\"\nkind = \"categorical\"\n",
        );
        write(dir, "toy.csv", "a,y\n1,p\n2,q\n");
    }

    const GOOD: &str = r#"
        factuals_per_class = 2
        [seeds]
        split = 1
        model = 2
        factuals = 3
        generators = 4
        [[dataset]]
        schema = "toy.schema.toml"
        data = "toy.csv"
        [[generator]]
        name = "gradient"
        params = { step_size = 0.1 }
        [[generator]]
        name = "spheres_raw"
        kind = "spheres"
        project_ohe = false
    "#;

    #[test]
    fn well_formed_config_passes() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(dir.path(), "run.toml", GOOD);
        let cfg = validate_config(&dir.path().join("run.toml"), &Registry::with_builtins()).unwrap();
        assert_eq!(cfg.generators[1].kind(), "spheres");
        assert!(!cfg.generators[1].project_ohe);
        assert_eq!(cfg.hash.len(), 64);
    }

    #[test]
    fn duplicate_generator_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let text = GOOD.replace("name = \"spheres_raw\"", "name = \"gradient\"");
        write(dir.path(), "run.toml", &text);
        let errs = validate_config(&dir.path().join("run.toml"), &Registry::with_builtins()).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("duplicate generator")), "{errs:?}");
    }

    #[test]
    fn missing_seed_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(dir.path(), "run.toml", &GOOD.replace("model = 2", ""));
        let errs = validate_config(&dir.path().join("run.toml"), &Registry::with_builtins()).unwrap_err();
        assert!(errs[0].contains("model"), "{errs:?}");
    }

    #[test]
    fn missing_files_and_bad_kinds_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let text = GOOD.replace("kind = \"spheres\"", "kind = \"nope\"");
        write(dir.path(), "run.toml", &text);
        let errs = validate_config(&dir.path().join("run.toml"), &Registry::with_builtins()).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("schema")));
        assert!(errs.iter().any(|e| e.contains("does not exist")));
        assert!(errs.iter().any(|e| e.contains("unknown kind")));
    }
}
