//! Inter-task conflict metrics computed from recorded traces: gradient
//! conflict ratio, expert-activation divergence and the harmonic mean.
//! Everything here is a pure function of its inputs.

use serde::{Deserialize, Serialize};

use crate::error::{ClaspError, Result};
use crate::pc_moe::GateRecord;
use crate::tensor::{dot, l2_norm};

/// Flattened gradient of every task on every shared layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTrace {
    pub tasks: Vec<String>,
    pub layers: Vec<String>,
    /// `[task][layer]`
    pub gradients: Vec<Vec<Vec<f64>>>,
}

impl GradientTrace {
    pub fn validate(&self) -> Result<()> {
        if self.gradients.len() != self.tasks.len() {
            return Err(ClaspError::Structural(format!(
                "{} task names but {} gradient sets",
                self.tasks.len(),
                self.gradients.len()
            )));
        }
        for (t, per_layer) in self.gradients.iter().enumerate() {
            if per_layer.len() != self.layers.len() {
                return Err(ClaspError::Structural(format!(
                    "task {} covers {} layers, expected {}",
                    self.tasks[t],
                    per_layer.len(),
                    self.layers.len()
                )));
            }
            for (l, g) in per_layer.iter().enumerate() {
                if g.len() != self.gradients[0][l].len() {
                    return Err(ClaspError::Structural(format!(
                        "layer {} has differing lengths across tasks",
                        self.layers[l]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cosine of two gradients; zero when either vector is zero.
pub fn gradient_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ClaspError::Structural(format!(
            "gradient lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-layer fraction of ordered task pairs with negative cosine.
pub fn layer_conflicts(trace: &GradientTrace) -> Result<Vec<f64>> {
    trace.validate()?;
    let t = trace.tasks.len();
    if t < 2 {
        return Err(ClaspError::Usage(format!("conflict ratio needs >= 2 tasks, got {t}")));
    }
    if trace.layers.is_empty() {
        return Err(ClaspError::Usage("conflict ratio over zero layers".into()));
    }
    let pairs = (t * (t - 1)) as f64;
    (0..trace.layers.len())
        .map(|l| {
            let mut neg = 0usize;
            for i in 0..t {
                for j in 0..t {
                    if i != j && gradient_cosine(&trace.gradients[i][l], &trace.gradients[j][l])? < 0.0 {
                        neg += 1;
                    }
                }
            }
            Ok(neg as f64 / pairs)
        })
        .collect()
}

pub fn conflict_ratio(trace: &GradientTrace) -> Result<f64> {
    let per_layer = layer_conflicts(trace)?;
    Ok(per_layer.iter().sum::<f64>() / per_layer.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertActivationProfile {
    pub probs: Vec<f64>,
}

impl ExpertActivationProfile {
    /// Wraps a probability vector, checking it is one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ClaspError::Domain("profile entries must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ClaspError::Domain(format!("profile sums to {total}")));
        }
        Ok(Self { probs })
    }
}

/// Normalized gate mass per expert; selection counts when all mass is zero.
pub fn build_activation_profile(records: &[GateRecord]) -> Result<ExpertActivationProfile> {
    let first = records
        .first()
        .ok_or_else(|| ClaspError::Usage("activation profile needs at least one record".into()))?;
    let n = first.gates.len();
    if records.iter().any(|r| r.gates.len() != n) {
        return Err(ClaspError::Structural("gate records differ in expert count".into()));
    }
    let mut mass = vec![0.0; n];
    for r in records {
        mass.iter_mut().zip(&r.gates).for_each(|(m, g)| *m += g);
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 && mass.iter().all(|&m| m >= 0.0) {
        return Ok(ExpertActivationProfile {
            probs: mass.iter().map(|m| m / total).collect(),
        });
    }
    let mut counts = vec![0.0; n];
    for r in records {
        for &j in &r.selected {
            counts[j] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Err(ClaspError::Usage("no expert was ever selected".into()));
    }
    Ok(ExpertActivationProfile {
        probs: counts.iter().map(|c| c / total).collect(),
    })
}

/// `1 − (1/N)·Σ_e min(p_i[e], p_j[e])`.
pub fn expert_activation_divergence(p_i: &[f64], p_j: &[f64], n: usize) -> Result<f64> {
    if p_i.len() != n || p_j.len() != n || n == 0 {
        return Err(ClaspError::Structural(format!(
            "profiles of length {} and {} for N = {n}",
            p_i.len(),
            p_j.len()
        )));
    }
    let overlap: f64 = p_i.iter().zip(p_j).map(|(a, b)| a.min(*b)).sum();
    Ok(1.0 - overlap / n as f64)
}

/// Pairwise divergence matrix over task profiles.
pub fn divergence_matrix(profiles: &[ExpertActivationProfile]) -> Result<Vec<Vec<f64>>> {
    let n = profiles.first().map_or(0, |p| p.probs.len());
    profiles
        .iter()
        .map(|a| {
            profiles
                .iter()
                .map(|b| expert_activation_divergence(&a.probs, &b.probs, n))
                .collect()
        })
        .collect()
}

pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(ClaspError::Domain(format!("harmonic mean needs positive inputs, got {a}, {b}")));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Summary written by `clasp diagnose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub tasks: Vec<String>,
    pub layers: usize,
    pub gcr: f64,
    pub layer_conflicts: Vec<f64>,
    /// `[task][task]`, averaged over stages. Absent when the trace carries no profiles.
    pub ead: Option<Vec<Vec<f64>>>,
}

/// Builds a report from a gradient trace and optional per-stage profiles
/// (`[stage][task]`).
pub fn report(trace: &GradientTrace, profiles: Option<&[Vec<ExpertActivationProfile>]>) -> Result<DiagnosticsReport> {
    let layer_conflicts = layer_conflicts(trace)?;
    let gcr = layer_conflicts.iter().sum::<f64>() / layer_conflicts.len() as f64;
    let ead = match profiles {
        Some(stages) if !stages.is_empty() => {
            let t = stages[0].len();
            let mut acc = vec![vec![0.0; t]; t];
            for st in stages {
                if st.len() != t {
                    return Err(ClaspError::Structural("stages disagree on task count".into()));
                }
                let m = divergence_matrix(st)?;
                for i in 0..t {
                    for j in 0..t {
                        acc[i][j] += m[i][j] / stages.len() as f64;
                    }
                }
            }
            Some(acc)
        }
        _ => None,
    };
    Ok(DiagnosticsReport {
        tasks: trace.tasks.clone(),
        layers: trace.layers.len(),
        gcr,
        layer_conflicts,
        ead,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(gs: &[&[f64]]) -> GradientTrace {
        GradientTrace {
            tasks: (0..gs.len()).map(|i| format!("t{i}")).collect(),
            layers: vec!["l0".into()],
            gradients: gs.iter().map(|g| vec![g.to_vec()]).collect(),
        }
    }

    #[test]
    fn cosines() {
        assert_eq!(gradient_cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(gradient_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((gradient_cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-9);
        assert_eq!(gradient_cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(gradient_cosine(&[1.0], &[1.0, 2.0]), Err(ClaspError::Structural(_))));
    }

    #[test]
    fn ratios() {
        assert_eq!(conflict_ratio(&trace(&[&[1.0, 0.0], &[-1.0, 0.0]])).unwrap(), 1.0);
        assert_eq!(conflict_ratio(&trace(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(), 0.0);
        let r = conflict_ratio(&trace(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(conflict_ratio(&trace(&[&[1.0]])), Err(ClaspError::Usage(_))));
        let scaled = conflict_ratio(&trace(&[&[3.0, 0.0], &[-0.1, 0.0], &[0.0, 7.0]])).unwrap();
        assert_eq!(scaled, r);
    }

    fn rec(g: &[f64]) -> GateRecord {
        GateRecord {
            task: 0,
            gates: g.to_vec(),
            selected: (0..g.len()).filter(|&i| g[i] != 0.0).collect(),
        }
    }

    #[test]
    fn profiles_and_divergence() {
        let p = build_activation_profile(&[rec(&[0.5, 0.5, 0.0])]).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5, 0.0]);
        let p = build_activation_profile(&[rec(&[1.0, 0.0]), rec(&[0.0, 1.0])]).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5]);
        assert!(matches!(build_activation_profile(&[]), Err(ClaspError::Usage(_))));

        assert_eq!(expert_activation_divergence(&[0.5, 0.5], &[0.5, 0.5], 2).unwrap(), 0.5);
        assert_eq!(expert_activation_divergence(&[1.0, 0.0], &[0.0, 1.0], 2).unwrap(), 1.0);
        let d = expert_activation_divergence(&[0.7, 0.3], &[0.3, 0.7], 2).unwrap();
        assert!((d - 0.7).abs() < 1e-12);
        assert!(matches!(expert_activation_divergence(&[1.0], &[0.5, 0.5], 2), Err(ClaspError::Structural(_))));
    }

    #[test]
    fn harmonic() {
        assert!((harmonic_mean(94.6, 61.74).unwrap() - 74.716).abs() < 1e-3);
        assert!((harmonic_mean(3.0, 3.0).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(harmonic_mean(2.0, 5.0).unwrap(), harmonic_mean(5.0, 2.0).unwrap());
        assert!(matches!(harmonic_mean(0.0, 1.0), Err(ClaspError::Domain(_))));
    }
}
