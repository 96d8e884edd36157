//! Robustness measurement: the mean normalized perturbation size
//! rho = mean ||r||_2 / ||x||_2 over a test set, per-attack reports, and
//! comparison tables across defenses.

use serde::{Deserialize, Serialize};

use crate::attack::{
    argmax_rows, deepfool, fgsm, high_confidence_attack, AttackConfig, DeepFoolConfig, ModelOracle,
};
use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::defense::select_targets;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// Which attack drives the evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalAttack {
    /// The high-confidence attack; target from the closest boundary,
    /// confidence matched to the model's confidence on the original input.
    HighConfidence(AttackConfig),
    DeepFool(DeepFoolConfig),
    Fgsm { eps: f64 },
}

impl EvalAttack {
    pub fn name(&self) -> &'static str {
        match self {
            EvalAttack::HighConfidence(_) => "high-confidence",
            EvalAttack::DeepFool(_) => "deepfool",
            EvalAttack::Fgsm { .. } => "fgsm",
        }
    }
}

/// One evaluated example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub true_label: usize,
    pub adversarial_target: Option<usize>,
    pub r_norm: f64,
    pub x_norm: f64,
    pub success: bool,
    pub iterations: usize,
    pub confidence: f64,
}

/// Aggregated robustness evaluation for one checkpoint and one attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub attack: String,
    /// Mean ||r||/||x|| over successful attacks.
    pub rho_adv: f64,
    pub test_error: f64,
    /// Successful attacks included in the mean.
    pub included: usize,
    /// Attacks that failed within their iteration budget.
    pub failures: usize,
    /// Examples skipped: clean mistakes plus zero-norm inputs.
    pub skipped_misclassified: usize,
    pub skipped_zero_norm: usize,
    pub records: Vec<ExampleRecord>,
    pub dataset_fingerprint: String,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub preset: String,
}

impl RobustnessReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Corrupt(format!("report json: {e}")))
    }

    /// Per-example CSV (full precision, round-trips with the JSON form).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "index,true_label,adversarial_target,r_norm,x_norm,success,iterations,confidence\n",
        );
        for r in &self.records {
            let tgt = r
                .adversarial_target
                .map(|t| t.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.17e},{:.17e},{},{},{:.17e}\n",
                r.index, r.true_label, tgt, r.r_norm, r.x_norm, r.success, r.iterations, r.confidence
            ));
        }
        out
    }

    /// Histogram of ||r||/||x|| over included examples, as CSV rows
    /// (bin_lo, bin_hi, count) for external plotting.
    pub fn histogram_csv(&self, bins: usize) -> String {
        let ratios: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.success && r.x_norm > 0.0)
            .map(|r| r.r_norm / r.x_norm)
            .collect();
        let hi = ratios.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
        let mut counts = vec![0usize; bins];
        for &v in &ratios {
            let i = ((v / hi) * bins as f64).floor() as usize;
            counts[i.min(bins - 1)] += 1;
        }
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in counts.iter().enumerate() {
            out.push_str(&format!(
                "{:.6},{:.6},{}\n",
                hi * i as f64 / bins as f64,
                hi * (i + 1) as f64 / bins as f64,
                c
            ));
        }
        out
    }
}

/// Plain accuracy complement (%), evaluation mode.
pub fn test_error(params: &ParamSet, ds: &Dataset) -> Result<f64> {
    let oracle = ModelOracle::for_classifier(params);
    let mut wrong = 0usize;
    let chunk = 500.min(ds.len().max(1));
    let mut i = 0;
    while i < ds.len() {
        let hi = (i + chunk).min(ds.len());
        let rows: Vec<&[f64]> = (i..hi).map(|j| ds.images.row(j)).collect();
        let xb = Tensor::stack_rows(&rows);
        let logp = oracle.log_probs(&xb)?;
        for (j, (pred, _)) in argmax_rows(&logp).iter().enumerate() {
            if *pred != ds.labels[i + j] {
                wrong += 1;
            }
        }
        i = hi;
    }
    Ok(100.0 * wrong as f64 / ds.len().max(1) as f64)
}

/// Hash of a checkpoint's serialized bytes (for report fingerprints).
pub fn checkpoint_hash(params: &ParamSet) -> String {
    let dir = std::env::temp_dir().join(format!("advcritic-hash-{}", std::process::id()));
    let _ = std::fs::create_dir_all(&dir);
    let path = dir.join("ckpt.tmp");
    if params.save(&path).is_ok() {
        if let Ok(bytes) = std::fs::read(&path) {
            let _ = std::fs::remove_file(&path);
            return crate::data::sha256_hex(&bytes);
        }
    }
    "unhashed".to_string()
}

/// Run one attack over every test example and aggregate rho.
///
/// Examples the clean model already misclassifies are skipped and
/// counted; so are all-zero inputs (the ratio is undefined). Failed
/// attacks are excluded from the mean and reported as failures. Every
/// claimed success is re-verified with an independent forward pass.
pub fn robustness(
    params: &ParamSet,
    ds: &Dataset,
    attack: &EvalAttack,
    seed: u64,
    preset: &str,
) -> Result<RobustnessReport> {
    if ds.is_empty() {
        return Err(Error::Data("empty evaluation dataset".into()));
    }
    let oracle = ModelOracle::for_classifier(params);
    let k = params.k;

    // clean predictions
    let logp = batched_log_probs(&oracle, ds)?;
    let preds = argmax_rows(&logp);

    let mut eligible: Vec<usize> = Vec::new();
    let mut skipped_misclassified = 0usize;
    let mut skipped_zero_norm = 0usize;
    for i in 0..ds.len() {
        if preds[i].0 != ds.labels[i] {
            skipped_misclassified += 1;
            continue;
        }
        let x_norm = norm_of(ds.images.row(i));
        if x_norm == 0.0 {
            skipped_zero_norm += 1;
            continue;
        }
        eligible.push(i);
    }

    let mut records = Vec::with_capacity(eligible.len());
    let mut rho_sum = 0.0;
    let mut included = 0usize;
    let mut failures = 0usize;

    match attack {
        EvalAttack::HighConfidence(cfg) => {
            // targets: closest decision boundary; C: confidence on x
            let rows: Vec<&[f64]> = eligible.iter().map(|&i| ds.images.row(i)).collect();
            if rows.is_empty() {
                return empty_report(attack, params, ds, seed, preset, skipped_misclassified, skipped_zero_norm);
            }
            let xb = Tensor::stack_rows(&rows);
            let (lp, jac) = oracle.probe_jacobian(&xb)?;
            let labels: Vec<usize> = eligible.iter().map(|&i| ds.labels[i]).collect();
            let targets = select_targets(&lp, &jac, &labels);
            let confidences: Vec<f64> = eligible
                .iter()
                .enumerate()
                .map(|(row, _)| {
                    // matched to the original prediction confidence, kept
                    // inside (0,1) for the loop guard
                    lp.row(row)[labels[row]].exp().min(1.0 - 1e-12)
                })
                .collect();
            let results = high_confidence_attack(&oracle, &xb, &targets, &confidences, cfg)?;
            for (slot, res) in results.iter().enumerate() {
                let i = eligible[slot];
                let x_norm = norm_of(ds.images.row(i));
                // independent forward re-verification
                let xadv = Tensor::new(vec![1, ds.dim()], res.x_adv.data().to_vec())?;
                let lp_check = oracle.log_probs(&xadv)?;
                let p_target = lp_check.row(0)[targets[slot]].exp();
                let verified = res.success && p_target >= confidences[slot] - 1e-12;
                let rec = ExampleRecord {
                    index: i,
                    true_label: ds.labels[i],
                    adversarial_target: Some(targets[slot]),
                    r_norm: res.r.l2_norm(),
                    x_norm,
                    success: verified,
                    iterations: res.iterations,
                    confidence: p_target,
                };
                if verified {
                    rho_sum += rec.r_norm / rec.x_norm;
                    included += 1;
                } else {
                    failures += 1;
                }
                records.push(rec);
            }
        }
        EvalAttack::DeepFool(cfg) => {
            let rows: Vec<&[f64]> = eligible.iter().map(|&i| ds.images.row(i)).collect();
            if rows.is_empty() {
                return empty_report(attack, params, ds, seed, preset, skipped_misclassified, skipped_zero_norm);
            }
            let xb = Tensor::stack_rows(&rows);
            let results = deepfool(&oracle, &xb, cfg)?;
            for (slot, res) in results.iter().enumerate() {
                let i = eligible[slot];
                let x_norm = norm_of(ds.images.row(i));
                let xadv = Tensor::new(vec![1, ds.dim()], res.x_adv.data().to_vec())?;
                let lp_check = oracle.log_probs(&xadv)?;
                let (new_pred, p_new) = argmax_rows(&lp_check)[0];
                let verified = res.success && new_pred != ds.labels[i];
                let rec = ExampleRecord {
                    index: i,
                    true_label: ds.labels[i],
                    adversarial_target: None,
                    r_norm: res.r.l2_norm(),
                    x_norm,
                    success: verified,
                    iterations: res.iterations,
                    confidence: p_new,
                };
                if verified {
                    rho_sum += rec.r_norm / rec.x_norm;
                    included += 1;
                } else {
                    failures += 1;
                }
                records.push(rec);
            }
        }
        EvalAttack::Fgsm { eps } => {
            for &i in &eligible {
                let x = Tensor::new(vec![1, ds.dim()], ds.images.row(i).to_vec())?;
                let adv = fgsm(&oracle, &x, &[ds.labels[i]], *eps, (0.0, 1.0))?;
                let lp_check = oracle.log_probs(&adv)?;
                let (new_pred, p_new) = argmax_rows(&lp_check)[0];
                let r: Vec<f64> = adv
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&a, &o)| a - o)
                    .collect();
                let r_norm = norm_of(&r);
                let x_norm = norm_of(ds.images.row(i));
                let success = new_pred != ds.labels[i];
                if success {
                    rho_sum += r_norm / x_norm;
                    included += 1;
                } else {
                    failures += 1;
                }
                records.push(ExampleRecord {
                    index: i,
                    true_label: ds.labels[i],
                    adversarial_target: None,
                    r_norm,
                    x_norm,
                    success,
                    iterations: 1,
                    confidence: p_new,
                });
            }
        }
    }
    let _ = k;

    Ok(RobustnessReport {
        attack: attack.name().to_string(),
        rho_adv: if included > 0 { rho_sum / included as f64 } else { 0.0 },
        test_error: 100.0 * skipped_misclassified as f64 / ds.len() as f64,
        included,
        failures,
        skipped_misclassified,
        skipped_zero_norm,
        records,
        dataset_fingerprint: ds.fingerprint.clone(),
        checkpoint_hash: checkpoint_hash(params),
        seed,
        preset: preset.to_string(),
    })
}

fn empty_report(
    attack: &EvalAttack,
    params: &ParamSet,
    ds: &Dataset,
    seed: u64,
    preset: &str,
    skipped_misclassified: usize,
    skipped_zero_norm: usize,
) -> Result<RobustnessReport> {
    Ok(RobustnessReport {
        attack: attack.name().to_string(),
        rho_adv: 0.0,
        test_error: 100.0 * skipped_misclassified as f64 / ds.len() as f64,
        included: 0,
        failures: 0,
        skipped_misclassified,
        skipped_zero_norm,
        records: Vec::new(),
        dataset_fingerprint: ds.fingerprint.clone(),
        checkpoint_hash: checkpoint_hash(params),
        seed,
        preset: preset.to_string(),
    })
}

fn batched_log_probs(oracle: &ModelOracle, ds: &Dataset) -> Result<Tensor> {
    let mut all = Vec::with_capacity(ds.len() * params_k(oracle));
    let chunk = 500.min(ds.len());
    let mut i = 0;
    while i < ds.len() {
        let hi = (i + chunk).min(ds.len());
        let rows: Vec<&[f64]> = (i..hi).map(|j| ds.images.row(j)).collect();
        let xb = Tensor::stack_rows(&rows);
        let lp = oracle.log_probs(&xb)?;
        all.extend_from_slice(lp.data());
        i = hi;
    }
    Tensor::new(vec![ds.len(), params_k(oracle)], all)
}

fn params_k(oracle: &ModelOracle) -> usize {
    oracle.class_count()
}

fn norm_of(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// A named row for the comparison table.
#[derive(Debug, Clone)]
pub struct NamedReport {
    pub defense: String,
    pub report: RobustnessReport,
}

/// Render reports as a defenses-by-attacks table (text plus CSV).
/// Refuses to mix reports from different datasets.
pub fn compare(reports: &[NamedReport]) -> Result<(String, String)> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to compare".into()));
    }
    let fp = &reports[0].report.dataset_fingerprint;
    for r in reports {
        if &r.report.dataset_fingerprint != fp {
            return Err(Error::FingerprintMismatch(format!(
                "`{}` evaluated on {}, expected {}",
                r.defense, r.report.dataset_fingerprint, fp
            )));
        }
    }
    // rows: defense; columns: test error then rho per attack (stable order)
    let mut attacks: Vec<String> = Vec::new();
    for r in reports {
        if !attacks.contains(&r.report.attack) {
            attacks.push(r.report.attack.clone());
        }
    }
    attacks.sort();
    let mut defenses: Vec<String> = Vec::new();
    for r in reports {
        if !defenses.contains(&r.defense) {
            defenses.push(r.defense.clone());
        }
    }
    defenses.sort();

    let cell = |d: &str, a: &str| -> Option<&RobustnessReport> {
        reports
            .iter()
            .find(|r| r.defense == d && r.report.attack == a)
            .map(|r| &r.report)
    };

    let mut text = format!("{:<16} {:>9}", "defense", "err%");
    for a in &attacks {
        text.push_str(&format!(" {:>16}", format!("rho[{a}]")));
    }
    text.push('\n');
    let mut csv = String::from("defense,test_error");
    for a in &attacks {
        csv.push_str(&format!(",rho_{a}"));
    }
    csv.push('\n');
    for d in &defenses {
        let err = reports
            .iter()
            .find(|r| &r.defense == d)
            .map(|r| r.report.test_error)
            .unwrap_or(f64::NAN);
        text.push_str(&format!("{d:<16} {err:>9.2}"));
        csv.push_str(&format!("{d},{err}"));
        for a in &attacks {
            match cell(d, a) {
                Some(rep) => {
                    text.push_str(&format!(" {:>16.4}", rep.rho_adv));
                    csv.push_str(&format!(",{}", rep.rho_adv));
                }
                None => {
                    text.push_str(&format!(" {:>16}", "-"));
                    csv.push(',');
                }
            }
        }
        text.push('\n');
        csv.push('\n');
    }
    Ok((text, csv))
}
