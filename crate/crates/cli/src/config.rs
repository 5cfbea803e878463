//! Run configuration: a JSON file, with command-line overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use social_kernels::dataset::{
    generate_synthetic, load_dataset, Dataset, DatasetPaths, LoadOptions, SyntheticParams,
};
use social_kernels::eval::{parse_methods, EvalConfig, Method};
use social_kernels::{Error, Result};

/// Where the dataset comes from: CSV files, or the synthetic generator when
/// no files are named.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four conventionally named CSV files.
    pub dir: Option<PathBuf>,
    /// Explicit file paths; override `dir`.
    pub paths: Option<DatasetPaths>,
    pub synthetic: Option<SyntheticParams>,
    /// Relax the loader: allow friendships naming unknown users and users
    /// without friends.
    pub lenient: bool,
}

impl DataConfig {
    pub fn paths(&self) -> Option<DatasetPaths> {
        self.paths
            .clone()
            .or_else(|| self.dir.as_deref().map(DatasetPaths::in_dir))
    }

    pub fn validate(&self) -> Result<()> {
        match (self.paths(), &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Parameter(
                "data: give either files or synthetic parameters, not both".into(),
            )),
            (Some(p), None) => {
                let mut required = vec![&p.ratings, &p.friendships];
                required.extend(p.demographics.iter());
                required.extend(p.claims.iter());
                for path in required {
                    if !path.exists() {
                        return Err(Error::Parameter(format!(
                            "data file {} does not exist",
                            path.display()
                        )));
                    }
                }
                Ok(())
            }
            (None, Some(s)) => s.validate(),
            (None, None) => Ok(()),
        }
    }

    /// Loads the files, or generates the synthetic dataset (default
    /// parameters when nothing is configured).
    pub fn load(&self) -> Result<Dataset> {
        match self.paths() {
            Some(p) => load_dataset(
                &p,
                LoadOptions {
                    strict: !self.lenient,
                },
            ),
            None => generate_synthetic(&self.synthetic.clone().unwrap_or_default()),
        }
    }

    pub fn describe(&self) -> String {
        match self.paths() {
            Some(p) => format!(
                "files {} and {}",
                p.ratings.display(),
                p.friendships.display()
            ),
            None => {
                let s = self.synthetic.clone().unwrap_or_default();
                format!(
                    "synthetic, {} users, {} items, seed {}",
                    s.n_users, s.n_items, s.seed
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Method names; empty means every registered method.
    pub methods: Vec<String>,
    pub folds: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
    #[serde(flatten)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            methods: Vec::new(),
            folds: 10,
            repetitions: 10,
            seed: 0,
            out: PathBuf::from("results"),
            threads: None,
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that replace configuration entries when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub methods: Option<Vec<String>>,
    pub folds: Option<usize>,
    pub repetitions: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub kernel_cache: Option<PathBuf>,
    pub threads: Option<usize>,
    pub clamp: Option<bool>,
    pub strict_leakage: bool,
    pub shared_eta: bool,
    pub normalize_mni: bool,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(dir) = &o.data {
            self.data.dir = Some(dir.clone());
            self.data.paths = None;
            self.data.synthetic = None;
        }
        if let Some(m) = &o.methods {
            self.methods = m.clone();
        }
        if let Some(k) = o.folds {
            self.folds = k;
        }
        if let Some(r) = o.repetitions {
            self.repetitions = r;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(c) = &o.kernel_cache {
            self.eval.kernel_cache = Some(c.clone());
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some(c) = o.clamp {
            self.eval.svr.clamp = c;
        }
        self.eval.strict_leakage |= o.strict_leakage;
        self.eval.shared_eta |= o.shared_eta;
        self.eval.baseline.normalize_mni |= o.normalize_mni;
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            Ok(Method::all())
        } else {
            parse_methods(&self.methods)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.methods()?;
        if self.folds < 2 {
            return Err(Error::Parameter(format!(
                "folds = {} must be at least 2",
                self.folds
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::Parameter("repetitions must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Parameter("threads must be at least 1".into()));
        }
        self.eval.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(c, back);
        c.validate().unwrap();
        assert_eq!(c.methods().unwrap().len(), 23);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(
            r#"{"folds": 5, "methods": ["NI", "COMBINED"], "svr": {"C": 4.0},
                "data": {"synthetic": {"n_users": 80}}}"#,
        )
        .unwrap();
        assert_eq!(c.folds, 5);
        assert_eq!(c.repetitions, 10);
        assert_eq!(c.eval.svr.c, 4.0);
        assert_eq!(c.eval.svr.epsilon, 0.5);
        assert_eq!(c.data.synthetic.as_ref().unwrap().n_users, 80);
        assert_eq!(c.data.synthetic.as_ref().unwrap().n_items, 50);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            methods: Some(vec!["MNI".into()]),
            folds: Some(3),
            clamp: Some(false),
            strict_leakage: true,
            normalize_mni: true,
            ..Overrides::default()
        });
        assert_eq!(c.methods().unwrap(), vec![Method::Mni]);
        assert_eq!(c.folds, 3);
        assert!(!c.eval.svr.clamp);
        assert!(c.eval.strict_leakage && c.eval.baseline.normalize_mni);
        assert!(!c.eval.shared_eta);
    }

    #[test]
    fn validation_errors() {
        let mut c = RunConfig {
            methods: vec!["K_NOPE".into()],
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        c.methods.clear();
        c.folds = 1;
        assert!(c.validate().is_err());
        c.folds = 2;
        c.data.dir = Some(PathBuf::from("/nonexistent/data/dir"));
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
        c.data.dir = None;
        c.data.synthetic = Some(SyntheticParams {
            n_users: 0,
            ..SyntheticParams::default()
        });
        assert!(c.validate().is_err());
    }
}
