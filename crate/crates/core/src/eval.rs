//! User-level k-fold cross-validation of every predictor: per-item model
//! training, hyperparameter tuning inside the training folds, RMSE per
//! repetition, the friend-count breakdown and report export.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{
    apply_fallback, mni_estimate, pearson, predict_cf, predict_ni, predict_ucf_bias,
    BaselineConfig, Fallback, Prediction, MAX_MNI_LEVEL,
};
use crate::community::detect_communities;
use crate::dataset::{split_folds, Dataset, RatingMask, RatingMatrix, MAX_RATING, MIN_RATING};
use crate::error::{Error, Result};
use crate::graph::{FriendBin, SocialGraph};
use crate::kernels::{
    action_overlap_kernel, all_ones_kernel, build_graph_kernel, claim_kernel, community_kernel,
    default_sigma, demographic_kernel, rating_bias_kernel, KernelConfig, KernelLabel, KernelMatrix,
};
use crate::nlmkl::{combined_row, fit_nlmkl, fit_nlmkl_shared, MklConfig};
use crate::svr::{train_svr, SvrConfig, SvrModel};

/// Similarity used by a kernel CF baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CfSimilarity {
    Kernel(KernelLabel),
    /// Mean of the seven theory kernels.
    Average,
    /// The named kernel plus `K_ACT2`.
    PlusAct2(KernelLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ni,
    Mni,
    Cf(CfSimilarity),
    /// Pearson user CF with bias; the kernel, when present, is added to the
    /// Pearson similarity.
    Ucf(Option<KernelLabel>),
    /// Single-kernel SVR.
    Svr(KernelLabel),
    Combined,
}

impl Method {
    /// Every registered method in report order.
    pub fn all() -> Vec<Method> {
        let mut v = vec![Method::Ni, Method::Mni];
        v.extend(KernelLabel::THEORY.map(|l| Method::Cf(CfSimilarity::Kernel(l))));
        v.push(Method::Cf(CfSimilarity::Average));
        v.push(Method::Cf(CfSimilarity::PlusAct2(KernelLabel::Id)));
        v.push(Method::Cf(CfSimilarity::PlusAct2(KernelLabel::Ct)));
        v.push(Method::Ucf(None));
        v.push(Method::Ucf(Some(KernelLabel::Id)));
        v.push(Method::Ucf(Some(KernelLabel::Ct)));
        v.extend(KernelLabel::THEORY.map(Method::Svr));
        v.push(Method::Combined);
        v
    }

    pub fn names() -> Vec<String> {
        Self::all().iter().map(Method::name).collect()
    }

    pub fn name(&self) -> String {
        match self {
            Method::Ni => "NI".into(),
            Method::Mni => "MNI".into(),
            Method::Cf(CfSimilarity::Kernel(l)) => format!("CF-S_{l}"),
            Method::Cf(CfSimilarity::Average) => "CF-S_AVG".into(),
            Method::Cf(CfSimilarity::PlusAct2(l)) => format!("CF-S_{l}-S_ACT2"),
            Method::Ucf(None) => "UCF-S_Pearson".into(),
            Method::Ucf(Some(l)) => format!("UCF-S_{l}-S_Pearson"),
            Method::Svr(l) => format!("K_{l}"),
            Method::Combined => "COMBINED".into(),
        }
    }

    /// Kernels the method reads, excluding the COMBINED subset.
    fn kernels(&self) -> Vec<KernelLabel> {
        match *self {
            Method::Ni | Method::Mni | Method::Ucf(None) | Method::Combined => vec![],
            Method::Cf(CfSimilarity::Kernel(l)) | Method::Ucf(Some(l)) | Method::Svr(l) => vec![l],
            Method::Cf(CfSimilarity::Average) => KernelLabel::THEORY.to_vec(),
            Method::Cf(CfSimilarity::PlusAct2(l)) => vec![l, KernelLabel::Act2],
        }
    }

    fn is_svr(&self) -> bool {
        matches!(self, Method::Svr(_) | Method::Combined)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::param(format!(
                    "unknown method {s:?}; valid methods: {}",
                    Method::names().join(", ")
                ))
            })
    }
}

/// Parses a list of method names, rejecting unknown and repeated ones.
pub fn parse_methods<S: AsRef<str>>(names: &[S]) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for n in names {
        let m: Method = n.as_ref().trim().parse()?;
        if out.contains(&m) {
            return Err(Error::param(format!("method {m} listed twice")));
        }
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::param("no methods requested"));
    }
    Ok(out)
}

/// How the per-repetition RMSE is formed from the folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One RMSE over all residuals of the repetition.
    #[default]
    Pooled,
    /// Mean of the per-fold RMSEs.
    FoldMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub enabled: bool,
    /// Fraction of the training-fold users held out to score candidates.
    pub holdout_fraction: f64,
    pub alpha_grid: Vec<f64>,
    /// Multipliers applied to the base RBF width of `K_ACT2`.
    pub sigma_scales: Vec<f64>,
    #[serde(rename = "C_grid")]
    pub c_grid: Vec<f64>,
    pub epsilon_grid: Vec<f64>,
    pub mni_damping: Vec<f64>,
    pub mni_max_level: usize,
    /// Outer MKL iterations while scoring COMBINED candidates; `None` keeps
    /// the configured count.
    pub combined_max_iters: Option<usize>,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            enabled: true,
            holdout_fraction: 0.2,
            alpha_grid: vec![0.1, 0.3, 0.5, 0.7, 0.85, 0.95],
            sigma_scales: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            c_grid: vec![0.1, 0.3, 1.0, 3.0, 10.0],
            epsilon_grid: vec![0.1, 0.3, 0.5],
            mni_damping: (1..=9).map(|i| i as f64 / 10.0).collect(),
            mni_max_level: MAX_MNI_LEVEL,
            combined_max_iters: None,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::param(format!(
                "holdout fraction {} must lie in (0, 1)",
                self.holdout_fraction
            )));
        }
        let grids: [(&str, &[f64]); 4] = [
            ("alpha_grid", &self.alpha_grid),
            ("sigma_scales", &self.sigma_scales),
            ("C_grid", &self.c_grid),
            ("mni_damping", &self.mni_damping),
        ];
        for (name, g) in grids {
            if g.is_empty() || g.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::param(format!(
                    "{name} must be non-empty and positive"
                )));
            }
        }
        if self
            .alpha_grid
            .iter()
            .chain(&self.mni_damping)
            .any(|&a| a >= 1.0)
        {
            return Err(Error::param(
                "alpha_grid and mni_damping values must be below 1",
            ));
        }
        if self.epsilon_grid.is_empty() || self.epsilon_grid.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::param(
                "epsilon_grid must be non-empty and non-negative",
            ));
        }
        if !(1..=MAX_MNI_LEVEL).contains(&self.mni_max_level) {
            return Err(Error::param(format!(
                "mni_max_level must lie in [1, {MAX_MNI_LEVEL}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub kernel: KernelConfig,
    pub svr: SvrConfig,
    pub mkl: MklConfig,
    pub baseline: BaselineConfig,
    pub tuning: TuningConfig,
    /// Hide every test-fold rating from the action kernels and from the
    /// user-CF profiles. Off, a test user's other ratings stay visible.
    pub strict_leakage: bool,
    /// One weight vector per fold shared by all items.
    pub shared_eta: bool,
    /// Fewest training raters an item needs for the kernel methods.
    pub min_train: usize,
    /// Kernels fused by COMBINED, in bank order.
    pub combined_kernels: Vec<KernelLabel>,
    pub pooling: Pooling,
    pub kernel_cache: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            kernel: KernelConfig::default(),
            svr: SvrConfig::default(),
            mkl: MklConfig::default(),
            baseline: BaselineConfig::default(),
            tuning: TuningConfig::default(),
            strict_leakage: false,
            shared_eta: false,
            min_train: 2,
            combined_kernels: KernelLabel::BANK.to_vec(),
            pooling: Pooling::Pooled,
            kernel_cache: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.svr.validate()?;
        self.mkl.validate()?;
        self.baseline.validate()?;
        self.tuning.validate()?;
        if self.min_train == 0 {
            return Err(Error::param("min_train must be at least 1"));
        }
        let subset = &self.combined_kernels;
        if subset.is_empty() || subset.contains(&KernelLabel::Combined) {
            return Err(Error::param("combined_kernels must list bank kernels"));
        }
        if subset.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param(
                "combined_kernels must follow bank order without repeats",
            ));
        }
        self.combined_eta0()?;
        Ok(())
    }

    /// Ball centre for the COMBINED subset: the configured vector when its
    /// length matches, else its bank entries for the subset.
    fn combined_eta0(&self) -> Result<Vec<f64>> {
        let eta0 = &self.mkl.eta0;
        if eta0.len() == self.combined_kernels.len() {
            Ok(eta0.clone())
        } else if eta0.len() == KernelLabel::BANK.len() {
            Ok(self
                .combined_kernels
                .iter()
                .map(|l| eta0[l.bank_index().expect("bank kernel")])
                .collect())
        } else {
            Err(Error::param(format!(
                "eta0 has {} entries for {} combined kernels",
                eta0.len(),
                self.combined_kernels.len()
            )))
        }
    }
}

/// One scored test pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub rep: usize,
    pub fold: usize,
    pub user: usize,
    pub item: usize,
    pub actual: f64,
    pub predicted: f64,
    /// False when the prediction is a fallback value.
    pub estimated: bool,
    /// Prediction of the method's alternative variant (the other clamping
    /// for SVR methods, the other normalisation for MNI).
    pub variant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResiduals {
    pub name: String,
    pub pairs: Vec<PairResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub rmse_per_rep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub rmse_per_rep: Vec<f64>,
    /// Fraction of test pairs predicted without fallback.
    pub coverage: f64,
    pub fallback_fraction: f64,
    pub pairs: usize,
    /// Model fits that stopped at their iteration limit.
    pub unconverged: usize,
    pub seconds: f64,
    pub variant: Option<VariantReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: FriendBin,
    pub pairs: usize,
    /// One entry per method of [`BinTable::methods`]; `None` for an empty bin.
    pub rmse: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub methods: Vec<String>,
    pub rows: Vec<BinRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub p: f64,
}

/// Parameters one method used in one fold; `None` where not applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub method: String,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    pub epsilon: Option<f64>,
    pub mni_damping: Option<f64>,
    pub mni_levels: Option<usize>,
}

/// Parameters chosen on the tuning split of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldTuning {
    pub rep: usize,
    pub fold: usize,
    pub methods: Vec<MethodParams>,
    /// `(damping, levels)` of the other MNI normalisation.
    pub mni_variant: Option<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: serde_json::Value,
    pub methods: Vec<MethodReport>,
    pub eta_labels: Vec<KernelLabel>,
    /// Mean learned weight per combined kernel; empty without COMBINED.
    pub eta_average: Vec<f64>,
    pub eta_fits: usize,
    pub bins: BinTable,
    /// COMBINED against every other method, paired by repetition.
    pub comparisons: Vec<Comparison>,
    pub tuning: Vec<FoldTuning>,
    pub repetitions_completed: usize,
    pub tuning_seconds: f64,
}

/// Report plus the raw residuals it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub residuals: Vec<MethodResiduals>,
}

pub fn rmse(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    if predictions.len() != actuals.len() {
        return Err(Error::Dimension {
            expected: actuals.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::param("RMSE of an empty sequence"));
    }
    let sse: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a).powi(2))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

fn pair_rmse<'a>(pairs: impl Iterator<Item = &'a PairResult>, variant: bool) -> Option<f64> {
    let (mut sse, mut n) = (0.0, 0usize);
    for p in pairs {
        let pred = if variant { p.variant? } else { p.predicted };
        sse += (pred - p.actual).powi(2);
        n += 1;
    }
    (n > 0).then(|| (sse / n as f64).sqrt())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Two-sided paired t test. When the differences do not vary, `t` is
/// `±∞` with `p = 0`, or `0` with `p = 1` for identical inputs.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::param("paired t test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    let df = d.len() - 1;
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                p: 0.0,
                df,
            }
        });
    }
    let t = mean / (sd / (d.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, p, df })
}

/// RMSE per friend-count bin of the predicted user, per method.
pub fn friend_bin_table(residuals: &[MethodResiduals], graph: &SocialGraph) -> BinTable {
    let rows = FriendBin::ALL
        .iter()
        .map(|&bin| {
            let in_bin = |p: &&PairResult| graph.friend_count_bin(p.user) == bin;
            let pairs = residuals
                .first()
                .map_or(0, |m| m.pairs.iter().filter(in_bin).count());
            let rmse = residuals
                .iter()
                .map(|m| pair_rmse(m.pairs.iter().filter(in_bin), false))
                .collect();
            BinRow { bin, pairs, rmse }
        })
        .collect();
    BinTable {
        methods: residuals.iter().map(|m| m.name.clone()).collect(),
        rows,
    }
}

/// Writes report.json, table3.csv, table4.csv and fig4.csv into `out_dir`.
pub fn export_report(report: &EvaluationReport, out_dir: &Path) -> Result<()> {
    if report.methods.is_empty() {
        return Err(Error::param("report has no methods"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let csv_err = |path: &Path, e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Validation(format!("{}: {kind:?}", path.display())),
    };

    let path = out_dir.join("table3.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["method", "rmse_mean", "rmse_std"])
        .map_err(|e| csv_err(&path, e))?;
    for m in &report.methods {
        w.write_record([
            m.name.clone(),
            m.rmse_mean.to_string(),
            m.rmse_std.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("table4.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["kernel", "eta"])
        .map_err(|e| csv_err(&path, e))?;
    for (label, eta) in report.eta_labels.iter().zip(&report.eta_average) {
        let name = match label {
            KernelLabel::Ones => label.to_string(),
            other => format!("K_{other}"),
        };
        w.write_record([name, eta.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("fig4.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["bin".to_string(), "pairs".to_string()];
    header.extend(report.bins.methods.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for row in &report.bins.rows {
        let mut rec = vec![row.bin.label().to_string(), row.pairs.to_string()];
        rec.extend(
            row.rmse
                .iter()
                .map(|r| r.map_or(String::new(), |v| v.to_string())),
        );
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Independent stream per purpose, repetition and fold.
fn derive_seed(seed: u64, tag: u64, rep: usize, fold: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | ((rep as u64) << 24) | fold as u64);
    rng.random()
}

const TAG_FOLDS: u64 = 1;
const TAG_HOLDOUT: u64 = 2;

/// Kernels shared by every fold.
struct KernelStore {
    default_alpha: f64,
    alphas: Vec<f64>,
    scales: Vec<f64>,
    /// Base RBF width, before the tuning multipliers.
    sigma: f64,
    /// `K_ID` per entry of `alphas`.
    id: Vec<KernelMatrix>,
    /// `K_ACT2` per entry of `scales`; empty in strict mode.
    act2: Vec<KernelMatrix>,
    /// The remaining kernels, indexed by bank position.
    fixed: Vec<Option<KernelMatrix>>,
}

impl KernelStore {
    /// The configured alpha and unscaled sigma, or the first candidates.
    fn default_choice(&self) -> KernelChoice {
        KernelChoice {
            alpha: self
                .alphas
                .iter()
                .position(|&a| a == self.default_alpha)
                .unwrap_or(0),
            scale: self.scales.iter().position(|&s| s == 1.0).unwrap_or(0),
        }
    }

    /// Every choice varying only the parameters of `labels`.
    fn choices(&self, labels: &[KernelLabel]) -> Vec<KernelChoice> {
        let d = self.default_choice();
        let alphas: Vec<usize> = if labels.contains(&KernelLabel::Id) {
            (0..self.alphas.len()).collect()
        } else {
            vec![d.alpha]
        };
        let scales: Vec<usize> = if labels.contains(&KernelLabel::Act2) {
            (0..self.scales.len()).collect()
        } else {
            vec![d.scale]
        };
        alphas
            .iter()
            .flat_map(|&alpha| {
                scales
                    .iter()
                    .map(move |&scale| KernelChoice { alpha, scale })
            })
            .collect()
    }

    fn build(
        dataset: &Dataset,
        config: &EvalConfig,
        needed: &BTreeSet<KernelLabel>,
    ) -> Result<Self> {
        let n = dataset.user_count();
        let tuning = config.tuning.enabled;
        let alphas = if tuning && needed.contains(&KernelLabel::Id) {
            config.tuning.alpha_grid.clone()
        } else {
            vec![config.kernel.alpha]
        };
        let scales = if tuning && needed.contains(&KernelLabel::Act2) {
            config.tuning.sigma_scales.clone()
        } else {
            vec![1.0]
        };
        let sigma = config
            .kernel
            .sigma
            .unwrap_or_else(|| default_sigma(dataset.ratings(), None));
        let cache = config.kernel_cache.as_deref();

        let id = if needed.contains(&KernelLabel::Id) {
            alphas
                .par_iter()
                .map(|&alpha| {
                    let kc = KernelConfig {
                        alpha,
                        ..config.kernel
                    };
                    build_graph_kernel(dataset, KernelLabel::Id, &kc, cache)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let act2 = if needed.contains(&KernelLabel::Act2) && !config.strict_leakage {
            scales
                .par_iter()
                .map(|&s| rating_bias_kernel(dataset.ratings(), n, sigma * s, None))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let fixed = KernelLabel::BANK
            .par_iter()
            .map(|&label| -> Result<Option<KernelMatrix>> {
                if !needed.contains(&label) {
                    return Ok(None);
                }
                let k = match label {
                    KernelLabel::Ones => all_ones_kernel(n)?,
                    KernelLabel::Ct => build_graph_kernel(dataset, label, &config.kernel, cache)?,
                    KernelLabel::Com => {
                        let c = detect_communities(dataset.graph(), config.kernel.community_seed);
                        community_kernel(&c, n)?
                    }
                    KernelLabel::Dem => demographic_kernel(dataset.demographics(), n)?,
                    KernelLabel::Cla => claim_kernel(dataset.claims(), n)?,
                    KernelLabel::Act1 if !config.strict_leakage => {
                        action_overlap_kernel(dataset.ratings(), n, None)?
                    }
                    _ => return Ok(None),
                };
                Ok(Some(k))
            })
            .collect::<Result<Vec<_>>>()?;

        let store = KernelStore {
            default_alpha: config.kernel.alpha,
            alphas,
            scales,
            sigma,
            id,
            act2,
            fixed,
        };
        store
            .id
            .iter()
            .chain(&store.act2)
            .chain(store.fixed.iter().flatten())
            .collect::<Vec<_>>()
            .par_iter()
            .map(|k| {
                let report = k.validate_psd(1e-8)?;
                if report.pass {
                    Ok(())
                } else {
                    Err(Error::Validation(format!(
                        "{} is not PSD: {report:?}",
                        k.label
                    )))
                }
            })
            .collect::<Result<Vec<()>>>()?;
        Ok(store)
    }
}

/// Index into the ID and ACT2 parameter candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct KernelChoice {
    alpha: usize,
    scale: usize,
}

/// Kernels seen by one fold.
struct FoldKernels<'a> {
    store: &'a KernelStore,
    /// Strict mode: ACT1 and ACT2-per-scale built without the test ratings.
    act1: Option<KernelMatrix>,
    act2: Vec<KernelMatrix>,
}

impl<'a> FoldKernels<'a> {
    fn id(&self, idx: usize) -> &KernelMatrix {
        &self.store.id[idx]
    }

    fn act2(&self, idx: usize) -> &KernelMatrix {
        if self.store.act2.is_empty() {
            &self.act2[idx]
        } else {
            &self.store.act2[idx]
        }
    }

    fn get(&self, label: KernelLabel, choice: KernelChoice) -> &KernelMatrix {
        match label {
            KernelLabel::Id => self.id(choice.alpha),
            KernelLabel::Act2 => self.act2(choice.scale),
            KernelLabel::Act1 if self.act1.is_some() => self.act1.as_ref().expect("checked"),
            other => self.store.fixed[other.bank_index().expect("bank kernel")]
                .as_ref()
                .unwrap_or_else(|| panic!("kernel {other} was not built")),
        }
    }

    /// Candidates a single-kernel SVR is tuned over, with a parameter index.
    fn candidates(&self, label: KernelLabel) -> Vec<(usize, &KernelMatrix)> {
        match label {
            KernelLabel::Id => (0..self.store.alphas.len())
                .map(|i| (i, self.id(i)))
                .collect(),
            KernelLabel::Act2 => (0..self.store.scales.len())
                .map(|i| (i, self.act2(i)))
                .collect(),
            other => vec![(0, self.get(other, self.store.default_choice()))],
        }
    }
}

/// Immutable inputs shared by every fold of a run.
struct Context<'a> {
    dataset: &'a Dataset,
    config: &'a EvalConfig,
    methods: &'a [Method],
    store: KernelStore,
    combined_eta0: Vec<f64>,
    seed: u64,
}

/// Training data of one fold.
struct FoldData<'a> {
    rep: usize,
    fold: usize,
    is_test: Vec<bool>,
    /// Ratings of the training-fold users only.
    train: RatingMatrix,
    kernels: FoldKernels<'a>,
    /// Fallback for pairs nothing else predicts.
    global: f64,
}

#[derive(Debug, Clone, Copy)]
struct SvrParams {
    c: f64,
    epsilon: f64,
}

#[derive(Debug, Clone, Copy)]
struct MniParams {
    damping: f64,
    levels: usize,
}

struct Tuned {
    /// Per method index: SVR parameters for SVR-based methods.
    svr: Vec<Option<SvrParams>>,
    /// Per method index: kernel parameters.
    choice: Vec<KernelChoice>,
    /// MNI parameters for the configured normalisation, then the other.
    mni: [MniParams; 2],
}

/// Output of one fold.
struct FoldOutput {
    pairs: Vec<Vec<PairResult>>,
    seconds: Vec<f64>,
    unconverged: Vec<usize>,
    etas: Vec<Vec<f64>>,
    tuning: FoldTuning,
    tuning_seconds: f64,
}

fn clamp_rating(x: f64) -> f64 {
    x.clamp(MIN_RATING, MAX_RATING)
}

impl<'a> Context<'a> {
    fn svr_config(&self, p: SvrParams) -> SvrConfig {
        SvrConfig {
            c: p.c,
            epsilon: p.epsilon,
            check_psd: false,
            ..self.config.svr
        }
    }

    fn mkl_config(&self, max_iters: Option<usize>) -> MklConfig {
        MklConfig {
            eta0: self.combined_eta0.clone(),
            max_iters: max_iters.unwrap_or(self.config.mkl.max_iters),
            ..self.config.mkl.clone()
        }
    }

    /// (primary, variant) of a raw SVR output under the clamp setting.
    fn svr_outputs(&self, raw: f64) -> (f64, f64) {
        if self.config.svr.clamp {
            (clamp_rating(raw), raw)
        } else {
            (raw, clamp_rating(raw))
        }
    }

    fn run_fold(&self, rep: usize, fold: usize, test: &[usize]) -> Result<FoldOutput> {
        let dataset = self.dataset;
        let n = dataset.user_count();
        let mut is_test = vec![false; n];
        for &u in test {
            is_test[u] = true;
        }
        let mask = RatingMask::with_users(test.iter().copied());
        let train = dataset.ratings().without(&mask);

        let needs = |label| {
            self.methods.iter().any(|m| m.kernels().contains(&label))
                || (self.methods.contains(&Method::Combined)
                    && self.config.combined_kernels.contains(&label))
        };
        let strict = self.config.strict_leakage;
        let act1 = (strict && needs(KernelLabel::Act1))
            .then(|| action_overlap_kernel(dataset.ratings(), n, Some(&mask)))
            .transpose()?;
        let act2 = if strict && needs(KernelLabel::Act2) {
            let sigma = self
                .config
                .kernel
                .sigma
                .unwrap_or_else(|| default_sigma(dataset.ratings(), Some(&mask)));
            self.store
                .scales
                .iter()
                .map(|&s| rating_bias_kernel(dataset.ratings(), n, sigma * s, Some(&mask)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let global = train
            .global_mean()
            .unwrap_or(0.5 * (MIN_RATING + MAX_RATING));
        let data = FoldData {
            rep,
            fold,
            is_test,
            train,
            kernels: FoldKernels {
                store: &self.store,
                act1,
                act2,
            },
            global,
        };

        let started = Instant::now();
        let tuned = if self.config.tuning.enabled {
            self.tune(&data)?
        } else {
            let p = SvrParams {
                c: self.config.svr.c,
                epsilon: self.config.svr.epsilon,
            };
            let b = &self.config.baseline;
            let m = MniParams {
                damping: b.alpha_mni,
                levels: b.max_level,
            };
            Tuned {
                svr: self
                    .methods
                    .iter()
                    .map(|m| m.is_svr().then_some(p))
                    .collect(),
                choice: vec![self.store.default_choice(); self.methods.len()],
                mni: [m, m],
            }
        };
        let tuning_seconds = started.elapsed().as_secs_f64();
        let tuning = self.describe(rep, fold, &tuned);
        log::debug!("rep {rep} fold {fold}: {tuning:?}");
        log::debug!("rep {rep} fold {fold}: {tuning:?}");

        let mut output = self.predict_fold(&data, &tuned)?;
        output.tuning = tuning;
        output.tuning_seconds = tuning_seconds;
        Ok(output)
    }

    fn describe(&self, rep: usize, fold: usize, tuned: &Tuned) -> FoldTuning {
        let methods = self
            .methods
            .iter()
            .enumerate()
            .map(|(mi, m)| {
                let mut labels = m.kernels();
                if *m == Method::Combined {
                    labels = self.config.combined_kernels.clone();
                }
                let choice = tuned.choice[mi];
                let mni = (*m == Method::Mni).then_some(tuned.mni[0]);
                MethodParams {
                    method: m.name(),
                    alpha: labels
                        .contains(&KernelLabel::Id)
                        .then(|| self.store.alphas[choice.alpha]),
                    sigma: labels
                        .contains(&KernelLabel::Act2)
                        .then(|| self.store.sigma * self.store.scales[choice.scale]),
                    c: tuned.svr[mi].map(|p| p.c),
                    epsilon: tuned.svr[mi].map(|p| p.epsilon),
                    mni_damping: mni.map(|p| p.damping),
                    mni_levels: mni.map(|p| p.levels),
                }
            })
            .collect();
        FoldTuning {
            rep,
            fold,
            methods,
            mni_variant: self
                .methods
                .contains(&Method::Mni)
                .then(|| (tuned.mni[1].damping, tuned.mni[1].levels)),
        }
    }

    /// Scores the test pairs of a fold with every method.
    fn predict_fold(&self, data: &FoldData, tuned: &Tuned) -> Result<FoldOutput> {
        let dataset = self.dataset;
        let m = self.methods.len();
        let max_level = self.mni_levels_needed();
        let levels: Vec<Option<Vec<Vec<usize>>>> = (0..dataset.user_count())
            .map(|u| {
                (data.is_test[u] && max_level > 0)
                    .then(|| dataset.graph().bfs_levels(u, max_level))
                    .transpose()
            })
            .collect::<Result<_>>()?;

        // Shared weights are learned once per fold before the item loop.
        let mut shared_seconds = 0.0;
        let combined_idx = self.methods.iter().position(|&x| x == Method::Combined);
        let shared = match combined_idx {
            Some(ci) if self.config.shared_eta => {
                let t = Instant::now();
                let r =
                    self.fit_shared(data, tuned.svr[ci].expect("svr params"), tuned.choice[ci])?;
                shared_seconds = t.elapsed().as_secs_f64();
                r
            }
            _ => None,
        };

        let items: Vec<ItemOutput> = (0..dataset.item_count())
            .into_par_iter()
            .map(|w| self.predict_item(data, tuned, &levels, shared.as_ref(), w))
            .collect::<Result<_>>()?;

        let mut out = FoldOutput {
            pairs: vec![Vec::new(); m],
            seconds: vec![0.0; m],
            unconverged: vec![0; m],
            etas: Vec::new(),
            tuning: FoldTuning {
                rep: data.rep,
                fold: data.fold,
                methods: Vec::new(),
                mni_variant: None,
            },
            tuning_seconds: 0.0,
        };
        if let (Some(ci), Some(s)) = (combined_idx, &shared) {
            out.seconds[ci] += shared_seconds;
            out.unconverged[ci] += usize::from(!s.converged);
            out.etas.push(s.eta.clone());
        }
        for item in items {
            for (k, pairs) in item.pairs.into_iter().enumerate() {
                out.pairs[k].extend(pairs);
            }
            for k in 0..m {
                out.seconds[k] += item.seconds[k];
                out.unconverged[k] += item.unconverged[k];
            }
            out.etas.extend(item.eta);
        }
        Ok(out)
    }

    fn mni_levels_needed(&self) -> usize {
        if !self.methods.contains(&Method::Mni) {
            0
        } else if self.config.tuning.enabled {
            self.config.tuning.mni_max_level
        } else {
            self.config.baseline.max_level
        }
    }

    /// A test user's visible ratings, excluding the target item.
    fn own_profile(&self, user: usize, item: usize) -> Vec<(usize, f64)> {
        if self.config.strict_leakage {
            Vec::new()
        } else {
            self.dataset
                .ratings()
                .user_ratings(user)
                .iter()
                .copied()
                .filter(|e| e.0 != item)
                .collect()
        }
    }

    fn resolve(
        &self,
        est: Option<f64>,
        data: &FoldData,
        own: &[(usize, f64)],
        item: usize,
    ) -> (f64, bool) {
        match apply_fallback(est, self.config.baseline.fallback, &data.train, own, item) {
            Prediction::Estimate(v) => (v, true),
            Prediction::Fallback(v) => (v, false),
            Prediction::Missing => (data.global, false),
        }
    }

    fn predict_item(
        &self,
        data: &FoldData,
        tuned: &Tuned,
        levels: &[Option<Vec<Vec<usize>>>],
        shared: Option<&SharedFit>,
        item: usize,
    ) -> Result<ItemOutput> {
        let m = self.methods.len();
        let mut out = ItemOutput {
            pairs: vec![Vec::new(); m],
            seconds: vec![0.0; m],
            unconverged: vec![0; m],
            eta: None,
        };
        let tests: Vec<(usize, f64)> = self
            .dataset
            .ratings()
            .item_ratings(item)
            .iter()
            .copied()
            .filter(|e| data.is_test[e.0])
            .collect();
        if tests.is_empty() {
            return Ok(out);
        }
        let train_raters: Vec<usize> = data.train.item_ratings(item).iter().map(|e| e.0).collect();
        let y: Vec<f64> = data.train.item_ratings(item).iter().map(|e| e.1).collect();
        let owns: Vec<Vec<(usize, f64)>> = tests
            .iter()
            .map(|&(v, _)| self.own_profile(v, item))
            .collect();
        let kernels = &data.kernels;

        for (mi, method) in self.methods.iter().enumerate() {
            let started = Instant::now();
            let choice = tuned.choice[mi];
            let pair = |user: usize,
                        actual: f64,
                        (predicted, estimated): (f64, bool),
                        variant: Option<f64>| PairResult {
                rep: data.rep,
                fold: data.fold,
                user,
                item,
                actual,
                predicted,
                estimated,
                variant,
            };
            let results: Vec<PairResult> = match *method {
                Method::Ni => tests
                    .iter()
                    .zip(&owns)
                    .map(|(&(v, r), own)| {
                        let est =
                            predict_ni(self.dataset.graph(), &data.train, v, item, Fallback::None)
                                .value();
                        pair(v, r, self.resolve(est, data, own, item), None)
                    })
                    .collect(),
                Method::Mni => {
                    let norm = self.config.baseline.normalize_mni;
                    tests
                        .iter()
                        .zip(&owns)
                        .map(|(&(v, r), own)| {
                            let lv = levels[v].as_ref().expect("levels for test users");
                            let est = |p: MniParams, normalize: bool| {
                                mni_estimate(lv, &data.train, item, p.damping, p.levels, normalize)
                            };
                            let primary = self.resolve(est(tuned.mni[0], norm), data, own, item);
                            let variant = self.resolve(est(tuned.mni[1], !norm), data, own, item).0;
                            pair(v, r, primary, Some(variant))
                        })
                        .collect()
                }
                Method::Cf(_) | Method::Ucf(_) => tests
                    .iter()
                    .zip(&owns)
                    .map(|(&(v, r), own)| {
                        let est =
                            self.cf_estimate(*method, kernels, choice, &data.train, v, item, own);
                        pair(v, r, self.resolve(est, data, own, item), None)
                    })
                    .collect(),
                Method::Svr(_) | Method::Combined if train_raters.len() < self.config.min_train => {
                    tests
                        .iter()
                        .zip(&owns)
                        .map(|(&(v, r), own)| pair(v, r, self.resolve(None, data, own, item), None))
                        .collect()
                }
                Method::Svr(label) => {
                    let k = kernels.get(label, choice);
                    let cfg = self.svr_config(tuned.svr[mi].expect("svr params"));
                    let model = self.item_svr(k, &train_raters, &y, &cfg)?;
                    out.unconverged[mi] += usize::from(!model.converged);
                    let rows = k.select(
                        &tests.iter().map(|e| e.0).collect::<Vec<_>>(),
                        &train_raters,
                    );
                    let mut res = Vec::with_capacity(tests.len());
                    for (t, &(v, r)) in tests.iter().enumerate() {
                        let row: Vec<f64> = rows.row(t).iter().copied().collect();
                        let (p, alt) = self.svr_outputs(model.predict_raw(&row)?);
                        res.push(pair(v, r, (p, true), Some(alt)));
                    }
                    res
                }
                Method::Combined => {
                    let subset: Vec<&KernelMatrix> = self
                        .config
                        .combined_kernels
                        .iter()
                        .map(|&l| kernels.get(l, choice))
                        .collect();
                    let (eta, model) = match shared {
                        Some(s) => {
                            let model = s.models.iter().find(|(w, _)| *w == item).map(|e| &e.1);
                            match model {
                                Some(model) => (s.eta.clone(), model.clone()),
                                None => {
                                    return Err(Error::Training(format!(
                                        "no shared model for item {item}"
                                    )))
                                }
                            }
                        }
                        None => {
                            let cfg = self.svr_config(tuned.svr[mi].expect("svr params"));
                            let (state, model) = fit_nlmkl(
                                &subset,
                                &train_raters,
                                &y,
                                &cfg,
                                &self.mkl_config(None),
                            )?;
                            out.unconverged[mi] +=
                                usize::from(!state.converged || !model.converged);
                            out.eta = Some(state.eta.clone());
                            (state.eta, model)
                        }
                    };
                    let mut res = Vec::with_capacity(tests.len());
                    for &(v, r) in &tests {
                        let row =
                            combined_row(&subset, &eta, self.config.mkl.degree, v, &train_raters);
                        let (p, alt) = self.svr_outputs(model.predict_raw(&row)?);
                        res.push(pair(v, r, (p, true), Some(alt)));
                    }
                    res
                }
            };
            out.pairs[mi] = results;
            out.seconds[mi] += started.elapsed().as_secs_f64();
        }
        Ok(out)
    }

    /// Kernel CF or user CF estimate for `(user, item)` from `ratings`.
    #[allow(clippy::too_many_arguments)]
    fn cf_estimate(
        &self,
        method: Method,
        kernels: &FoldKernels,
        choice: KernelChoice,
        ratings: &RatingMatrix,
        user: usize,
        item: usize,
        own: &[(usize, f64)],
    ) -> Option<f64> {
        let k = |l: KernelLabel, u: usize| kernels.get(l, choice).get(user, u);
        match method {
            Method::Cf(sim) => {
                let s = |u: usize| match sim {
                    CfSimilarity::Kernel(l) => k(l, u),
                    CfSimilarity::Average => {
                        KernelLabel::THEORY.iter().map(|&l| k(l, u)).sum::<f64>()
                            / KernelLabel::THEORY.len() as f64
                    }
                    CfSimilarity::PlusAct2(l) => k(l, u) + k(KernelLabel::Act2, u),
                };
                predict_cf(s, ratings, user, item, Fallback::None).value()
            }
            Method::Ucf(kernel) => {
                let s = |u: usize| {
                    let p = pearson(own, ratings.user_ratings(u));
                    kernel.map_or(p, |l| p + k(l, u))
                };
                predict_ucf_bias(s, ratings, own, user, item, Fallback::None).value()
            }
            _ => unreachable!("not a CF method"),
        }
    }

    fn item_svr(
        &self,
        k: &KernelMatrix,
        users: &[usize],
        y: &[f64],
        cfg: &SvrConfig,
    ) -> Result<SvrModel> {
        let sub = k.select(users, users);
        let mut model = train_svr(&sub, y, cfg)?;
        model.train_users = users.to_vec();
        Ok(model)
    }

    fn fit_shared(
        &self,
        data: &FoldData,
        params: SvrParams,
        choice: KernelChoice,
    ) -> Result<Option<SharedFit>> {
        let mut items = Vec::new();
        let mut problems = Vec::new();
        for w in 0..self.dataset.item_count() {
            let raters = data.train.item_ratings(w);
            let has_test = self
                .dataset
                .ratings()
                .item_ratings(w)
                .iter()
                .any(|e| data.is_test[e.0]);
            if raters.len() >= self.config.min_train && has_test {
                items.push(w);
                problems.push((
                    raters.iter().map(|e| e.0).collect::<Vec<_>>(),
                    raters.iter().map(|e| e.1).collect::<Vec<_>>(),
                ));
            }
        }
        if problems.is_empty() {
            return Ok(None);
        }
        let subset: Vec<&KernelMatrix> = self
            .config
            .combined_kernels
            .iter()
            .map(|&l| data.kernels.get(l, choice))
            .collect();
        let (state, models) = fit_nlmkl_shared(
            &subset,
            &problems,
            &self.svr_config(params),
            &self.mkl_config(None),
        )?;
        let converged = state.converged && models.iter().all(|m| m.converged);
        Ok(Some(SharedFit {
            eta: state.eta,
            converged,
            models: items.into_iter().zip(models).collect(),
        }))
    }

    /// Chooses kernel parameters, SVR `C`/`ε` and MNI parameters on a
    /// holdout of the training-fold users.
    fn tune(&self, data: &FoldData) -> Result<Tuned> {
        let n = self.dataset.user_count();
        let mut train_users: Vec<usize> = (0..n).filter(|&u| !data.is_test[u]).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, TAG_HOLDOUT, data.rep, data.fold));
        train_users.shuffle(&mut rng);
        let h = ((train_users.len() as f64 * self.config.tuning.holdout_fraction).ceil() as usize)
            .clamp(1, train_users.len().saturating_sub(1).max(1));
        let mut in_holdout = vec![false; n];
        for &u in &train_users[..h] {
            in_holdout[u] = true;
        }
        let split = InnerSplit::new(&data.train, &in_holdout, self.config.min_train);

        let grid: Vec<SvrParams> = self
            .config
            .tuning
            .c_grid
            .iter()
            .flat_map(|&c| {
                self.config
                    .tuning
                    .epsilon_grid
                    .iter()
                    .map(move |&epsilon| SvrParams { c, epsilon })
            })
            .collect();

        // Single-kernel SVRs pick their kernel parameter with C and epsilon;
        // COMBINED inherits the ID and ACT2 parameters chosen this way.
        let mut labels: Vec<KernelLabel> = self
            .methods
            .iter()
            .filter_map(|m| match m {
                Method::Svr(l) => Some(*l),
                _ => None,
            })
            .collect();
        if self.methods.contains(&Method::Combined) {
            for l in [KernelLabel::Id, KernelLabel::Act2] {
                if self.config.combined_kernels.contains(&l) && !labels.contains(&l) {
                    labels.push(l);
                }
            }
        }
        let mut svr_kernel = self.store.default_choice();
        let mut svr_params = Vec::new();
        for label in labels {
            let cands = data.kernels.candidates(label);
            let (pi, gi) = self.tune_svr(&split, &cands, &grid)?;
            match label {
                KernelLabel::Id => svr_kernel.alpha = pi,
                KernelLabel::Act2 => svr_kernel.scale = pi,
                _ => {}
            }
            svr_params.push((label, grid[gi]));
        }

        let mut svr = Vec::with_capacity(self.methods.len());
        let mut choice = Vec::with_capacity(self.methods.len());
        for method in self.methods {
            let (p, c) = match method {
                Method::Svr(l) => (
                    svr_params.iter().find(|e| e.0 == *l).map(|e| e.1),
                    svr_kernel,
                ),
                Method::Combined => (
                    Some(self.tune_combined(data, svr_kernel, &split, &grid)?),
                    svr_kernel,
                ),
                Method::Cf(_) | Method::Ucf(_) => (None, self.tune_cf(*method, data, &split)?),
                Method::Ni | Method::Mni => (None, self.store.default_choice()),
            };
            svr.push(p);
            choice.push(c);
        }

        let mni = if self.methods.contains(&Method::Mni) {
            let norm = self.config.baseline.normalize_mni;
            [self.tune_mni(&split, norm)?, self.tune_mni(&split, !norm)?]
        } else {
            let b = &self.config.baseline;
            let p = MniParams {
                damping: b.alpha_mni,
                levels: b.max_level,
            };
            [p, p]
        };
        Ok(Tuned { svr, choice, mni })
    }

    /// Index of the best (candidate kernel, grid point) by holdout error;
    /// the first wins ties.
    fn tune_svr(
        &self,
        split: &InnerSplit,
        cands: &[(usize, &KernelMatrix)],
        grid: &[SvrParams],
    ) -> Result<(usize, usize)> {
        let g = grid.len();
        let per_item: Vec<Vec<f64>> = split
            .items
            .par_iter()
            .map(|it| -> Result<Vec<f64>> {
                let mut sse = vec![0.0; cands.len() * g];
                for (ci, (_, k)) in cands.iter().enumerate() {
                    let sub = k.select(&it.train, &it.train);
                    let rows = k.select(&it.test, &it.train);
                    for (gi, &p) in grid.iter().enumerate() {
                        let model = train_svr(&sub, &it.y, &self.svr_config(p))?;
                        for t in 0..it.test.len() {
                            let row: Vec<f64> = rows.row(t).iter().copied().collect();
                            let pred = self.svr_outputs(model.predict_raw(&row)?).0;
                            sse[ci * g + gi] += (pred - it.actual[t]).powi(2);
                        }
                    }
                }
                Ok(sse)
            })
            .collect::<Result<_>>()?;
        let best = argmin(&sum_columns(&per_item, cands.len() * g));
        Ok((cands[best / g].0, best % g))
    }

    fn tune_combined(
        &self,
        data: &FoldData,
        choice: KernelChoice,
        split: &InnerSplit,
        grid: &[SvrParams],
    ) -> Result<SvrParams> {
        let subset: Vec<&KernelMatrix> = self
            .config
            .combined_kernels
            .iter()
            .map(|&l| data.kernels.get(l, choice))
            .collect();
        let mkl = self.mkl_config(self.config.tuning.combined_max_iters);
        let per_item: Vec<Vec<f64>> = split
            .items
            .par_iter()
            .map(|it| -> Result<Vec<f64>> {
                let mut sse = vec![0.0; grid.len()];
                for (gi, &p) in grid.iter().enumerate() {
                    let (state, model) =
                        fit_nlmkl(&subset, &it.train, &it.y, &self.svr_config(p), &mkl)?;
                    for (t, &u) in it.test.iter().enumerate() {
                        let row = combined_row(&subset, &state.eta, mkl.degree, u, &it.train);
                        let pred = self.svr_outputs(model.predict_raw(&row)?).0;
                        sse[gi] += (pred - it.actual[t]).powi(2);
                    }
                }
                Ok(sse)
            })
            .collect::<Result<_>>()?;
        Ok(grid[argmin(&sum_columns(&per_item, grid.len()))])
    }

    /// Visible ratings of a holdout user when predicting `item`, mirroring
    /// [`Context::own_profile`].
    fn holdout_profile(&self, rated: &[(usize, f64)], item: usize) -> Vec<(usize, f64)> {
        if self.config.strict_leakage {
            Vec::new()
        } else {
            rated.iter().copied().filter(|e| e.0 != item).collect()
        }
    }

    /// Kernel parameters of a CF method, by holdout error. Methods without
    /// ID or ACT2 keep the defaults.
    fn tune_cf(&self, method: Method, data: &FoldData, split: &InnerSplit) -> Result<KernelChoice> {
        let choices = self.store.choices(&method.kernels());
        if choices.len() == 1 {
            return Ok(choices[0]);
        }
        let global = split
            .ratings
            .global_mean()
            .unwrap_or(0.5 * (MIN_RATING + MAX_RATING));
        let per_user: Vec<Vec<f64>> = split
            .holdout
            .par_iter()
            .map(|(u, rated)| {
                let mut sse = vec![0.0; choices.len()];
                for &(item, actual) in rated {
                    let own = self.holdout_profile(rated, item);
                    for (ci, &c) in choices.iter().enumerate() {
                        let est = self.cf_estimate(
                            method,
                            &data.kernels,
                            c,
                            &split.ratings,
                            *u,
                            item,
                            &own,
                        );
                        let pred = apply_fallback(
                            est,
                            self.config.baseline.fallback,
                            &split.ratings,
                            &own,
                            item,
                        )
                        .value()
                        .unwrap_or(global);
                        sse[ci] += (pred - actual).powi(2);
                    }
                }
                sse
            })
            .collect();
        Ok(choices[argmin(&sum_columns(&per_user, choices.len()))])
    }

    fn tune_mni(&self, split: &InnerSplit, normalize: bool) -> Result<MniParams> {
        let t = &self.config.tuning;
        let candidates: Vec<MniParams> = t
            .mni_damping
            .iter()
            .flat_map(|&damping| {
                (1..=t.mni_max_level).map(move |levels| MniParams { damping, levels })
            })
            .collect();
        let graph = self.dataset.graph();
        let global = split
            .ratings
            .global_mean()
            .unwrap_or(0.5 * (MIN_RATING + MAX_RATING));
        let per_user: Vec<Vec<f64>> = split
            .holdout
            .par_iter()
            .map(|&(u, ref rated)| -> Result<Vec<f64>> {
                let levels = graph.bfs_levels(u, t.mni_max_level)?;
                let mut sse = vec![0.0; candidates.len()];
                for &(item, actual) in rated {
                    let own = self.holdout_profile(rated, item);
                    for (ci, p) in candidates.iter().enumerate() {
                        let est = mni_estimate(
                            &levels,
                            &split.ratings,
                            item,
                            p.damping,
                            p.levels,
                            normalize,
                        );
                        let pred = apply_fallback(
                            est,
                            self.config.baseline.fallback,
                            &split.ratings,
                            &own,
                            item,
                        )
                        .value()
                        .unwrap_or(global);
                        sse[ci] += (pred - actual).powi(2);
                    }
                }
                Ok(sse)
            })
            .collect::<Result<_>>()?;
        Ok(candidates[argmin(&sum_columns(&per_user, candidates.len()))])
    }
}

fn sum_columns(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut total = vec![0.0; width];
    for r in rows {
        for (t, x) in total.iter_mut().zip(r) {
            *t += x;
        }
    }
    total
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

struct SharedFit {
    eta: Vec<f64>,
    converged: bool,
    models: Vec<(usize, SvrModel)>,
}

struct ItemOutput {
    pairs: Vec<Vec<PairResult>>,
    seconds: Vec<f64>,
    unconverged: Vec<usize>,
    eta: Option<Vec<f64>>,
}

/// Per-item training and scoring sets of the tuning split.
struct InnerItem {
    train: Vec<usize>,
    y: Vec<f64>,
    test: Vec<usize>,
    actual: Vec<f64>,
}

struct InnerSplit {
    /// Training-fold ratings without the holdout users.
    ratings: RatingMatrix,
    items: Vec<InnerItem>,
    /// Holdout users with their ratings.
    holdout: Vec<(usize, Vec<(usize, f64)>)>,
}

impl InnerSplit {
    fn new(train: &RatingMatrix, in_holdout: &[bool], min_train: usize) -> Self {
        let holdout_users: Vec<usize> = (0..in_holdout.len()).filter(|&u| in_holdout[u]).collect();
        let ratings = train.without(&RatingMask::with_users(holdout_users.iter().copied()));
        let items = (0..train.item_count())
            .filter_map(|w| {
                let (mut tr, mut y, mut te, mut actual) =
                    (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for &(u, r) in train.item_ratings(w) {
                    if in_holdout[u] {
                        te.push(u);
                        actual.push(r);
                    } else {
                        tr.push(u);
                        y.push(r);
                    }
                }
                (tr.len() >= min_train && !te.is_empty()).then_some(InnerItem {
                    train: tr,
                    y,
                    test: te,
                    actual,
                })
            })
            .collect();
        let holdout = holdout_users
            .into_iter()
            .map(|u| (u, train.user_ratings(u).to_vec()))
            .filter(|(_, r)| !r.is_empty())
            .collect();
        InnerSplit {
            ratings,
            items,
            holdout,
        }
    }
}

/// Runs the evaluation protocol: `repetitions` reseeded `k`-fold splits of
/// the users, every method scored on every test-fold rating.
pub fn run_cross_validation(
    dataset: &Dataset,
    methods: &[Method],
    k: usize,
    repetitions: usize,
    seed: u64,
    config: &EvalConfig,
) -> Result<Evaluation> {
    run_cross_validation_with(dataset, methods, k, repetitions, seed, config, |_| {})
}

/// As [`run_cross_validation`], calling `on_rep` with the evaluation so far
/// after each completed repetition.
pub fn run_cross_validation_with(
    dataset: &Dataset,
    methods: &[Method],
    k: usize,
    repetitions: usize,
    seed: u64,
    config: &EvalConfig,
    mut on_rep: impl FnMut(&Evaluation),
) -> Result<Evaluation> {
    if methods.is_empty() {
        return Err(Error::param("no methods requested"));
    }
    if repetitions == 0 {
        return Err(Error::param("repetitions must be at least 1"));
    }
    if k < 2 || k > dataset.user_count() {
        return Err(Error::param(format!(
            "fold count {k} must lie in [2, {}]",
            dataset.user_count()
        )));
    }
    config.validate()?;
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].contains(m) {
            return Err(Error::param(format!("method {m} listed twice")));
        }
    }

    let mut needed: BTreeSet<KernelLabel> = methods.iter().flat_map(|m| m.kernels()).collect();
    if methods.contains(&Method::Combined) {
        needed.extend(config.combined_kernels.iter().copied());
    }
    let started = Instant::now();
    let store = KernelStore::build(dataset, config, &needed)?;
    log::info!(
        "built {} kernel matrices in {:.1}s",
        store.id.len() + store.act2.len() + store.fixed.iter().flatten().count(),
        started.elapsed().as_secs_f64()
    );
    let ctx = Context {
        dataset,
        config,
        methods,
        store,
        combined_eta0: config.combined_eta0()?,
        seed,
    };

    let snapshot = serde_json::json!({
        "methods": methods.iter().map(Method::name).collect::<Vec<_>>(),
        "folds": k,
        "repetitions": repetitions,
        "seed": seed,
        "eval": config,
    });
    let mut acc = Accumulator::new(methods, config);
    for rep in 0..repetitions {
        let folds = split_folds(
            dataset.user_count(),
            k,
            derive_seed(seed, TAG_FOLDS, rep, 0),
        )?;
        let outputs: Vec<FoldOutput> = (0..k)
            .into_par_iter()
            .map(|f| {
                let out = ctx.run_fold(rep, f, &folds.members(f));
                log::info!(
                    "repetition {}/{repetitions}, fold {}/{k} done",
                    rep + 1,
                    f + 1
                );
                out
            })
            .collect::<Result<_>>()?;
        acc.add_rep(outputs);
        on_rep(&acc.evaluation(dataset, snapshot.clone()));
    }
    Ok(acc.evaluation(dataset, snapshot))
}

/// Merges fold outputs as repetitions complete.
struct Accumulator {
    names: Vec<String>,
    pooling: Pooling,
    eta_labels: Vec<KernelLabel>,
    has_combined: bool,
    residuals: Vec<Vec<PairResult>>,
    /// Per method, per repetition: (primary, variant) RMSE.
    per_rep: Vec<Vec<(f64, Option<f64>)>>,
    seconds: Vec<f64>,
    unconverged: Vec<usize>,
    etas: Vec<Vec<f64>>,
    tuning: Vec<FoldTuning>,
    tuning_seconds: f64,
    variant_names: Vec<Option<String>>,
}

impl Accumulator {
    fn new(methods: &[Method], config: &EvalConfig) -> Self {
        let m = methods.len();
        let variant_names = methods
            .iter()
            .map(|method| match method {
                Method::Mni => Some(if config.baseline.normalize_mni {
                    "MNI (unnormalized)".to_string()
                } else {
                    "MNI (normalized)".to_string()
                }),
                Method::Svr(_) | Method::Combined => Some(format!(
                    "{} ({})",
                    method.name(),
                    if config.svr.clamp {
                        "unclamped"
                    } else {
                        "clamped"
                    }
                )),
                _ => None,
            })
            .collect();
        Accumulator {
            names: methods.iter().map(Method::name).collect(),
            pooling: config.pooling,
            eta_labels: config.combined_kernels.clone(),
            has_combined: methods.contains(&Method::Combined),
            residuals: vec![Vec::new(); m],
            per_rep: vec![Vec::new(); m],
            seconds: vec![0.0; m],
            unconverged: vec![0; m],
            etas: Vec::new(),
            tuning: Vec::new(),
            tuning_seconds: 0.0,
            variant_names,
        }
    }

    fn add_rep(&mut self, outputs: Vec<FoldOutput>) {
        for (mi, name) in self.names.iter().enumerate() {
            let folds: Vec<&Vec<PairResult>> = outputs.iter().map(|o| &o.pairs[mi]).collect();
            let score = |variant: bool| -> Option<f64> {
                match self.pooling {
                    Pooling::Pooled => pair_rmse(folds.iter().flat_map(|f| f.iter()), variant),
                    Pooling::FoldMean => {
                        let per: Vec<f64> = folds
                            .iter()
                            .filter(|f| !f.is_empty())
                            .map(|f| pair_rmse(f.iter(), variant))
                            .collect::<Option<_>>()?;
                        (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
                    }
                }
            };
            let primary = score(false).unwrap_or_else(|| {
                log::warn!("{name}: no test pairs in this repetition");
                f64::NAN
            });
            self.per_rep[mi].push((primary, score(true)));
        }
        for o in outputs {
            for (mi, pairs) in o.pairs.into_iter().enumerate() {
                self.residuals[mi].extend(pairs);
                self.seconds[mi] += o.seconds[mi];
                self.unconverged[mi] += o.unconverged[mi];
            }
            self.etas.extend(o.etas);
            self.tuning.push(o.tuning);
            self.tuning_seconds += o.tuning_seconds;
        }
    }

    fn evaluation(&self, dataset: &Dataset, config: serde_json::Value) -> Evaluation {
        let residuals: Vec<MethodResiduals> = self
            .names
            .iter()
            .zip(&self.residuals)
            .map(|(name, pairs)| MethodResiduals {
                name: name.clone(),
                pairs: pairs.clone(),
            })
            .collect();
        let methods: Vec<MethodReport> = (0..self.names.len())
            .map(|mi| {
                let rmse_per_rep: Vec<f64> = self.per_rep[mi].iter().map(|r| r.0).collect();
                let (rmse_mean, rmse_std) = mean_std(&rmse_per_rep);
                let pairs = self.residuals[mi].len();
                let estimated = self.residuals[mi].iter().filter(|p| p.estimated).count();
                let coverage = if pairs > 0 {
                    estimated as f64 / pairs as f64
                } else {
                    0.0
                };
                let variant = self.variant_names[mi].as_ref().and_then(|name| {
                    let per: Vec<f64> = self.per_rep[mi]
                        .iter()
                        .map(|r| r.1)
                        .collect::<Option<_>>()?;
                    let (m, s) = mean_std(&per);
                    Some(VariantReport {
                        name: name.clone(),
                        rmse_mean: m,
                        rmse_std: s,
                        rmse_per_rep: per,
                    })
                });
                MethodReport {
                    name: self.names[mi].clone(),
                    rmse_mean,
                    rmse_std,
                    rmse_per_rep,
                    coverage,
                    fallback_fraction: 1.0 - coverage,
                    pairs,
                    unconverged: self.unconverged[mi],
                    seconds: self.seconds[mi],
                    variant,
                }
            })
            .collect();

        let (eta_labels, eta_average) = if self.has_combined && !self.etas.is_empty() {
            let p = self.eta_labels.len();
            let mut avg = vec![0.0; p];
            for e in &self.etas {
                for (a, x) in avg.iter_mut().zip(e) {
                    *a += x;
                }
            }
            avg.iter_mut().for_each(|a| *a /= self.etas.len() as f64);
            (self.eta_labels.clone(), avg)
        } else {
            (Vec::new(), Vec::new())
        };

        let mut comparisons = Vec::new();
        if let Some(c) = methods.iter().find(|m| m.name == "COMBINED") {
            for other in methods.iter().filter(|m| m.name != "COMBINED") {
                if let Ok(t) = paired_t_test(&c.rmse_per_rep, &other.rmse_per_rep) {
                    comparisons.push(Comparison {
                        a: c.name.clone(),
                        b: other.name.clone(),
                        t: t.t,
                        p: t.p,
                    });
                }
            }
        }

        let report = EvaluationReport {
            config,
            bins: friend_bin_table(&residuals, dataset.graph()),
            methods,
            eta_labels,
            eta_average,
            eta_fits: self.etas.len(),
            comparisons,
            tuning: self.tuning.clone(),
            repetitions_completed: self.per_rep.first().map_or(0, Vec::len),
            tuning_seconds: self.tuning_seconds,
        };
        Evaluation { report, residuals }
    }
}

/// The report as JSON with every timing field removed, for comparing runs.
pub fn report_without_timing(report: &EvaluationReport) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(report)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("tuning_seconds");
        if let Some(methods) = obj.get_mut("methods").and_then(|m| m.as_array_mut()) {
            for m in methods {
                if let Some(o) = m.as_object_mut() {
                    o.remove("seconds");
                }
            }
        }
    }
    Ok(v)
}
