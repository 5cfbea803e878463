use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::builders::{self, masked_user_means};
use super::cache::{read_kernel, write_kernel};
use super::{cosine_normalize, KernelLabel, KernelMatrix, PsdReport};
use crate::community::{detect_communities, CommunityAssignment};
use crate::dataset::{Dataset, RatingMask, RatingMatrix};
use crate::error::{Error, Result};
use crate::graph::IsolatedPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Random-walk damping of the impact distribution kernel.
    pub alpha: f64,
    /// RBF width of the rating-bias kernel; `None` uses [`default_sigma`].
    pub sigma: Option<f64>,
    /// Cosine-normalize the graph kernels (ID, CT).
    pub normalize: bool,
    pub isolated: IsolatedPolicy,
    /// Seed for community detection.
    pub community_seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            alpha: 0.85,
            sigma: None,
            normalize: true,
            isolated: IsolatedPolicy::Teleport,
            community_seed: 0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param(format!(
                "alpha = {} must lie in (0, 1)",
                self.alpha
            )));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::param(format!("sigma = {s} must be positive")));
            }
        }
        Ok(())
    }
}

/// Sample standard deviation of the per-user mean ratings. Falls back to 1
/// when the means do not vary.
pub fn default_sigma(ratings: &RatingMatrix, mask: Option<&RatingMask>) -> f64 {
    let means = masked_user_means(ratings, ratings.user_count(), mask);
    if means.len() < 2 {
        return 1.0;
    }
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd > 1e-12 {
        sd
    } else {
        1.0
    }
}

/// The eight kernels in [`KernelLabel::BANK`] order, all over the same users.
#[derive(Debug, Clone)]
pub struct KernelBank {
    kernels: Vec<KernelMatrix>,
    communities: CommunityAssignment,
    sigma: f64,
}

impl KernelBank {
    /// Builds every kernel, in parallel. `mask` hides ratings from the two
    /// action kernels.
    pub fn build(
        dataset: &Dataset,
        config: &KernelConfig,
        mask: Option<&RatingMask>,
    ) -> Result<Self> {
        Self::build_with_cache(dataset, config, mask, None)
    }

    /// As [`KernelBank::build`], reusing the graph kernels (ID, CT) stored
    /// under `cache_dir` when a file with a matching key exists.
    pub fn build_with_cache(
        dataset: &Dataset,
        config: &KernelConfig,
        mask: Option<&RatingMask>,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        let n = dataset.user_count();
        let communities = detect_communities(dataset.graph(), config.community_seed);
        let sigma = config
            .sigma
            .unwrap_or_else(|| default_sigma(dataset.ratings(), mask));

        let kernels: Vec<KernelMatrix> = KernelLabel::BANK
            .par_iter()
            .map(|&label| match label {
                KernelLabel::Ones => builders::all_ones_kernel(n),
                KernelLabel::Id | KernelLabel::Ct => {
                    build_graph_kernel(dataset, label, config, cache_dir)
                }
                KernelLabel::Com => builders::community_kernel(&communities, n),
                KernelLabel::Dem => builders::demographic_kernel(dataset.demographics(), n),
                KernelLabel::Cla => builders::claim_kernel(dataset.claims(), n),
                KernelLabel::Act1 => builders::action_overlap_kernel(dataset.ratings(), n, mask),
                KernelLabel::Act2 => {
                    builders::rating_bias_kernel(dataset.ratings(), n, sigma, mask)
                }
                KernelLabel::Combined => unreachable!("not a bank kernel"),
            })
            .collect::<Result<_>>()?;

        Ok(KernelBank {
            kernels,
            communities,
            sigma,
        })
    }

    pub fn kernels(&self) -> &[KernelMatrix] {
        &self.kernels
    }

    pub fn get(&self, label: KernelLabel) -> &KernelMatrix {
        let idx = label
            .bank_index()
            .unwrap_or_else(|| panic!("{label} is not a bank kernel"));
        &self.kernels[idx]
    }

    /// Swaps in a kernel rebuilt with other parameters.
    pub fn replace(&mut self, k: KernelMatrix) -> Result<()> {
        let idx = k
            .label
            .bank_index()
            .ok_or_else(|| Error::param(format!("{} is not a bank kernel", k.label)))?;
        if k.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: k.dim(),
            });
        }
        self.kernels[idx] = k;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.kernels[0].dim()
    }

    pub fn communities(&self) -> &CommunityAssignment {
        &self.communities
    }

    /// RBF width the rating-bias kernel was built with.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// PSD report for each kernel, in bank order.
    pub fn validate(&self, tol: f64) -> Result<Vec<(KernelLabel, PsdReport)>> {
        self.kernels
            .par_iter()
            .map(|k| Ok((k.label, k.validate_psd(tol)?)))
            .collect()
    }
}

/// ID or CT under `config`, read from and written to `cache_dir` when given.
pub(crate) fn build_graph_kernel(
    dataset: &Dataset,
    label: KernelLabel,
    config: &KernelConfig,
    cache_dir: Option<&Path>,
) -> Result<KernelMatrix> {
    let build = || -> Result<KernelMatrix> {
        let k = match label {
            KernelLabel::Id => builders::impact_distribution_kernel(
                dataset.graph(),
                config.alpha,
                config.isolated,
            )?,
            KernelLabel::Ct => builders::commute_time_kernel(dataset.graph()),
            other => return Err(Error::param(format!("{other} is not a graph kernel"))),
        };
        Ok(graph_kernel(k, config.normalize))
    };
    match cache_dir {
        Some(dir) => cached(
            &cache_path(dir, label, config, &dataset.fingerprint()),
            build,
        ),
        None => build(),
    }
}

fn graph_kernel(k: KernelMatrix, normalize: bool) -> KernelMatrix {
    if normalize {
        cosine_normalize(&k)
    } else {
        k
    }
}

/// Cache file name, keyed by label, the parameters the kernel depends on and
/// the dataset fingerprint.
pub(crate) fn cache_path(
    dir: &Path,
    label: KernelLabel,
    config: &KernelConfig,
    fingerprint: &str,
) -> PathBuf {
    let params = match label {
        KernelLabel::Id => format!(
            "a{}-{}",
            config.alpha,
            match config.isolated {
                IsolatedPolicy::Reject => "r",
                IsolatedPolicy::Teleport => "t",
            }
        ),
        _ => String::from("p"),
    };
    let norm = if config.normalize { "n" } else { "u" };
    dir.join(format!(
        "{}-{params}-{norm}-{fingerprint}.kern",
        label.as_str().to_lowercase()
    ))
}

fn cached(path: &Path, build: impl FnOnce() -> Result<KernelMatrix>) -> Result<KernelMatrix> {
    if path.exists() {
        match read_kernel(path) {
            Ok(k) => {
                log::info!("loaded {} from cache {}", k.label, path.display());
                return Ok(k);
            }
            Err(e) => log::warn!("ignoring unreadable kernel cache {}: {e}", path.display()),
        }
    }
    let k = build()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_kernel(path, &k)?;
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticParams};

    fn small() -> Dataset {
        generate_synthetic(&SyntheticParams {
            n_users: 60,
            n_items: 15,
            seed: 4,
            ..SyntheticParams::default()
        })
        .unwrap()
    }

    #[test]
    fn bank_order_and_validity() {
        let d = small();
        let bank = KernelBank::build(&d, &KernelConfig::default(), None).unwrap();
        let labels: Vec<_> = bank.kernels().iter().map(|k| k.label).collect();
        assert_eq!(labels, KernelLabel::BANK.to_vec());
        for (label, report) in bank.validate(1e-8).unwrap() {
            assert!(report.pass, "{label}: {report:?}");
        }
        for k in bank.kernels() {
            assert!(super::super::asymmetry(&k.matrix).0 <= 1e-10);
            for i in 0..k.dim() {
                assert!((k.get(i, i) - 1.0).abs() < 1e-10, "{} diagonal", k.label);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = KernelConfig {
            alpha: 1.0,
            ..KernelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = KernelConfig {
            sigma: Some(0.0),
            ..KernelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cache_is_reused_and_survives_corruption() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let config = KernelConfig::default();
        let first = KernelBank::build_with_cache(&d, &config, None, Some(dir.path())).unwrap();
        let path = cache_path(dir.path(), KernelLabel::Id, &config, &d.fingerprint());
        assert!(path.exists());
        let second = KernelBank::build_with_cache(&d, &config, None, Some(dir.path())).unwrap();
        assert_eq!(first.get(KernelLabel::Id), second.get(KernelLabel::Id));

        std::fs::write(&path, b"garbage").unwrap();
        let third = KernelBank::build_with_cache(&d, &config, None, Some(dir.path())).unwrap();
        assert_eq!(first.get(KernelLabel::Id), third.get(KernelLabel::Id));
        assert!(read_kernel(&path).is_ok());

        let other = KernelConfig {
            alpha: 0.5,
            ..config
        };
        assert_ne!(
            path,
            cache_path(dir.path(), KernelLabel::Id, &other, &d.fingerprint())
        );
    }

    #[test]
    fn default_sigma_is_sample_sd_of_means() {
        let r = RatingMatrix::new(3, 1, [(0, 0, 2.0), (1, 0, 4.0), (2, 0, 6.0)]).unwrap();
        assert!((default_sigma(&r, None) - 2.0).abs() < 1e-12);
        let flat = RatingMatrix::new(2, 1, [(0, 0, 5.0), (1, 0, 5.0)]).unwrap();
        assert_eq!(default_sigma(&flat, None), 1.0);
    }
}
