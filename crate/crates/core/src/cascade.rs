//! Linear-threshold weak classifiers, staged rejector cascades, and their
//! evaluation in plaintext or over ciphertexts.
//!
//! A weak classifier votes `alpha` when the window's projection onto its
//! hyperplane reaches `theta` and `beta` otherwise; a stage accepts when the
//! sum of its votes is non-negative; the cascade accepts a window only if
//! every stage does, stopping at the first rejection. One comparison
//! convention (`>=` at the threshold, accept at exactly zero score) is used
//! by both the plaintext and the encrypted paths so their decisions agree
//! exactly away from the threshold.
//!
//! Encrypting a detector replaces every hyperplane with a data-side
//! ciphertext; the vote values and thresholds stay in plaintext, which is
//! exactly what the evaluating server is allowed to see. Secure evaluation
//! costs two length-`L` dot products per weak classifier, and all votes in a
//! stage are computed before the stage decision — there is no early exit
//! inside a stage.

use std::path::Path;

use rand::Rng;

use crate::aspe::{secure_inner, DetectorKey, EncDataVector, EncQueryVector};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::image::normalize_window;

pub const MODEL_MAGIC: [u8; 4] = *b"CASC";
pub const ENC_MODEL_MAGIC: [u8; 4] = *b"CASE";
pub const MODEL_FORMAT_VERSION: u16 = 1;

/// A thresholded linear functional over a window vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakClassifier {
    /// The hyperplane the window is projected onto; length is the model's
    /// window vector length.
    pub hyperplane: Vec<f64>,
    /// Vote when the projection reaches the threshold.
    pub alpha: f64,
    /// Vote otherwise.
    pub beta: f64,
    /// Decision threshold.
    pub theta: f64,
}

/// One rejector: an ordered, non-empty set of weak classifiers whose summed
/// votes decide the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStage {
    pub weak_classifiers: Vec<WeakClassifier>,
}

/// A staged detector over square windows of `window_edge × window_edge`
/// pixels, flattened to vectors of length `window_edge²`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    window_edge: u16,
    stages: Vec<CascadeStage>,
}

/// A weak classifier whose hyperplane has been replaced by a data-side
/// ciphertext. The vote values and threshold are deliberately plaintext.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedWeakClassifier {
    pub enc_hyperplane: EncDataVector,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
}

/// The server-side form of a [`CascadeModel`]: same stage structure, same
/// plaintext parameters, encrypted hyperplanes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedDetector {
    window_edge: u16,
    stages: Vec<Vec<EncryptedWeakClassifier>>,
}

/// What evaluating one window yields. `accepted` holds exactly when
/// `rejected_at_stage` is absent; `stage_scores` has one entry per stage
/// actually evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutcome {
    pub accepted: bool,
    pub rejected_at_stage: Option<usize>,
    pub stage_scores: Vec<f64>,
}

impl CascadeModel {
    /// Validates and assembles a model: at least one stage, no empty stages,
    /// hyperplane lengths equal to `window_edge²`, and no constant
    /// classifiers (`alpha == beta` is a model error).
    pub fn new(window_edge: u16, stages: Vec<CascadeStage>) -> Result<Self> {
        if window_edge == 0 {
            return Err(Error::Protocol("window edge must be positive".into()));
        }
        if stages.is_empty() {
            return Err(Error::Protocol("cascade must have at least one stage".into()));
        }
        let len = (window_edge as usize).pow(2);
        for stage in &stages {
            if stage.weak_classifiers.is_empty() {
                return Err(Error::Protocol("cascade stage must be non-empty".into()));
            }
            for wc in &stage.weak_classifiers {
                if wc.hyperplane.len() != len {
                    return Err(Error::Dimension {
                        expected: len,
                        got: wc.hyperplane.len(),
                    });
                }
                if wc.alpha == wc.beta {
                    return Err(Error::Protocol(
                        "constant weak classifier (alpha == beta)".into(),
                    ));
                }
            }
        }
        Ok(Self { window_edge, stages })
    }

    pub fn window_edge(&self) -> u16 {
        self.window_edge
    }

    /// Length of the window vectors this model consumes.
    pub fn window_len(&self) -> usize {
        (self.window_edge as usize).pow(2)
    }

    pub fn stages(&self) -> &[CascadeStage] {
        &self.stages
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.weak_classifiers.len()).collect()
    }

    pub fn total_weak_classifiers(&self) -> usize {
        self.stages.iter().map(|s| s.weak_classifiers.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(&MODEL_MAGIC);
        w.put_u16(MODEL_FORMAT_VERSION);
        w.put_u16(self.window_edge);
        w.put_u16(self.stages.len() as u16);
        for stage in &self.stages {
            w.put_u32(stage.weak_classifiers.len() as u32);
            for wc in &stage.weak_classifiers {
                w.put_f64_slice(&wc.hyperplane);
                w.put_f64(wc.alpha);
                w.put_f64(wc.beta);
                w.put_f64(wc.theta);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&MODEL_MAGIC, "cascade model")?;
        r.expect_version(MODEL_FORMAT_VERSION)?;
        let window_edge = r.u16()?;
        if window_edge == 0 {
            return Err(r.error("window edge must be positive"));
        }
        let len = (window_edge as usize).pow(2);
        let stage_count = r.u16()? as usize;
        if stage_count == 0 {
            return Err(r.error("cascade must have at least one stage"));
        }
        let mut stages = Vec::with_capacity(stage_count);
        for _ in 0..stage_count {
            let n = r.u32()? as usize;
            if n == 0 {
                return Err(r.error("cascade stage must be non-empty"));
            }
            let mut wcs = Vec::with_capacity(n);
            for _ in 0..n {
                let hyperplane = r.f64_vec(len)?;
                let alpha = r.f64()?;
                let beta = r.f64()?;
                let theta = r.f64()?;
                if alpha == beta {
                    return Err(r.error("constant weak classifier (alpha == beta)"));
                }
                wcs.push(WeakClassifier { hyperplane, alpha, beta, theta });
            }
            stages.push(CascadeStage { weak_classifiers: wcs });
        }
        r.finish()?;
        Self::new(window_edge, stages)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl EncryptedDetector {
    pub fn window_edge(&self) -> u16 {
        self.window_edge
    }

    pub fn window_len(&self) -> usize {
        (self.window_edge as usize).pow(2)
    }

    pub fn stages(&self) -> &[Vec<EncryptedWeakClassifier>] {
        &self.stages
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.len()).collect()
    }

    pub fn total_weak_classifiers(&self) -> usize {
        self.stages.iter().map(|s| s.len()).sum()
    }

    /// Same layout as the plaintext model file, with the two ciphertext
    /// halves in place of each hyperplane and its own magic so the two kinds
    /// of file cannot be confused.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(&ENC_MODEL_MAGIC);
        w.put_u16(MODEL_FORMAT_VERSION);
        w.put_u16(self.window_edge);
        w.put_u16(self.stages.len() as u16);
        for stage in &self.stages {
            w.put_u32(stage.len() as u32);
            for wc in stage {
                w.put_f64_slice(wc.enc_hyperplane.part1());
                w.put_f64_slice(wc.enc_hyperplane.part2());
                w.put_f64(wc.alpha);
                w.put_f64(wc.beta);
                w.put_f64(wc.theta);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&ENC_MODEL_MAGIC, "encrypted detector")?;
        r.expect_version(MODEL_FORMAT_VERSION)?;
        let window_edge = r.u16()?;
        if window_edge == 0 {
            return Err(r.error("window edge must be positive"));
        }
        let len = (window_edge as usize).pow(2);
        let stage_count = r.u16()? as usize;
        if stage_count == 0 {
            return Err(r.error("cascade must have at least one stage"));
        }
        let mut stages = Vec::with_capacity(stage_count);
        for _ in 0..stage_count {
            let n = r.u32()? as usize;
            if n == 0 {
                return Err(r.error("cascade stage must be non-empty"));
            }
            let mut wcs = Vec::with_capacity(n);
            for _ in 0..n {
                let part1 = r.f64_vec(len)?;
                let part2 = r.f64_vec(len)?;
                let enc_hyperplane = EncDataVector::from_parts(part1, part2)?;
                let alpha = r.f64()?;
                let beta = r.f64()?;
                let theta = r.f64()?;
                wcs.push(EncryptedWeakClassifier { enc_hyperplane, alpha, beta, theta });
            }
            stages.push(wcs);
        }
        r.finish()?;
        Ok(Self { window_edge, stages })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Vote of a single weak classifier on a plaintext window.
pub fn eval_weak_plain(wc: &WeakClassifier, x: &[f64]) -> Result<f64> {
    if x.len() != wc.hyperplane.len() {
        return Err(Error::Dimension {
            expected: wc.hyperplane.len(),
            got: x.len(),
        });
    }
    let dot: f64 = x.iter().zip(&wc.hyperplane).map(|(a, b)| a * b).sum();
    Ok(if dot >= wc.theta { wc.alpha } else { wc.beta })
}

/// Summed votes of one stage; accepts on a non-negative score. Every
/// classifier in the stage is evaluated before the decision.
pub fn eval_stage_plain(stage: &CascadeStage, x: &[f64]) -> Result<(bool, f64)> {
    let mut score = 0.0;
    for wc in &stage.weak_classifiers {
        score += eval_weak_plain(wc, x)?;
    }
    Ok((score >= 0.0, score))
}

/// Runs the cascade on a plaintext window: stages in order, stopping at the
/// first rejection.
pub fn eval_cascade_plain(model: &CascadeModel, x: &[f64]) -> Result<DetectionOutcome> {
    if x.len() != model.window_len() {
        return Err(Error::Dimension {
            expected: model.window_len(),
            got: x.len(),
        });
    }
    let mut stage_scores = Vec::new();
    for (i, stage) in model.stages.iter().enumerate() {
        let (accepted, score) = eval_stage_plain(stage, x)?;
        stage_scores.push(score);
        if !accepted {
            return Ok(DetectionOutcome {
                accepted: false,
                rejected_at_stage: Some(i),
                stage_scores,
            });
        }
    }
    Ok(DetectionOutcome {
        accepted: true,
        rejected_at_stage: None,
        stage_scores,
    })
}

/// Encrypts every hyperplane with the product key, carrying the vote values
/// and thresholds over in plaintext and preserving the stage structure
/// exactly.
pub fn encrypt_detector<R: Rng + ?Sized>(
    key: &DetectorKey,
    model: &CascadeModel,
    rng: &mut R,
) -> Result<EncryptedDetector> {
    if key.dim() != model.window_len() {
        return Err(Error::Dimension {
            expected: model.window_len(),
            got: key.dim(),
        });
    }
    let stages = model
        .stages
        .iter()
        .map(|stage| {
            stage
                .weak_classifiers
                .iter()
                .map(|wc| {
                    Ok(EncryptedWeakClassifier {
                        enc_hyperplane: key.encrypt_data(&wc.hyperplane, rng)?,
                        alpha: wc.alpha,
                        beta: wc.beta,
                        theta: wc.theta,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncryptedDetector {
        window_edge: model.window_edge,
        stages,
    })
}

/// Server-side cascade evaluation over an encrypted window. Each vote costs
/// one [`secure_inner`]; stage and cascade composition are identical to the
/// plaintext path.
pub fn eval_cascade_secure(
    enc: &EncryptedDetector,
    ew: &EncQueryVector,
) -> Result<DetectionOutcome> {
    if ew.dim() != enc.window_len() {
        return Err(Error::Dimension {
            expected: enc.window_len(),
            got: ew.dim(),
        });
    }
    let mut stage_scores = Vec::new();
    for (i, stage) in enc.stages.iter().enumerate() {
        let mut score = 0.0;
        for wc in stage {
            let t = secure_inner(&wc.enc_hyperplane, ew)?;
            score += if t >= wc.theta { wc.alpha } else { wc.beta };
        }
        stage_scores.push(score);
        if score < 0.0 {
            return Ok(DetectionOutcome {
                accepted: false,
                rejected_at_stage: Some(i),
                stage_scores,
            });
        }
    }
    Ok(DetectionOutcome {
        accepted: true,
        rejected_at_stage: None,
        stage_scores,
    })
}

/// Number of probe windows used to calibrate synthetic thresholds.
const CALIBRATION_PROBES: usize = 256;

/// Generates a random cascade with the given per-stage classifier counts.
/// Hyperplanes are unit-normalized Gaussian draws; each threshold is set to
/// the median response over random normalized probe windows so the
/// classifier fires on roughly half of random inputs; votes satisfy
/// `alpha > 0 > beta`. Deterministic for a fixed RNG state.
pub fn synth_cascade<R: Rng + ?Sized>(
    stage_sizes: &[usize],
    window_edge: u16,
    rng: &mut R,
) -> Result<CascadeModel> {
    if stage_sizes.is_empty() {
        return Err(Error::Protocol("stage size list must be non-empty".into()));
    }
    if stage_sizes.contains(&0) {
        return Err(Error::Protocol("stage sizes must be positive".into()));
    }
    let len = (window_edge as usize).pow(2);
    let probes: Vec<Vec<f64>> = (0..CALIBRATION_PROBES)
        .map(|_| {
            let raw: Vec<f64> = (0..len).map(|_| crate::aspe::gaussian(rng)).collect();
            normalize_window(&raw)
        })
        .collect();

    let stages = stage_sizes
        .iter()
        .map(|&n| {
            let weak_classifiers = (0..n)
                .map(|_| {
                    let mut hyperplane: Vec<f64> =
                        (0..len).map(|_| crate::aspe::gaussian(rng)).collect();
                    let norm = hyperplane.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for h in &mut hyperplane {
                        *h /= norm;
                    }
                    let alpha = rng.random_range(0.5..=1.5);
                    let beta = rng.random_range(-1.5..=-0.5);
                    let mut responses: Vec<f64> = probes
                        .iter()
                        .map(|p| p.iter().zip(&hyperplane).map(|(a, b)| a * b).sum())
                        .collect();
                    responses.sort_by(|a, b| a.total_cmp(b));
                    let theta = responses[responses.len() / 2];
                    WeakClassifier { hyperplane, alpha, beta, theta }
                })
                .collect();
            CascadeStage { weak_classifiers }
        })
        .collect();
    CascadeModel::new(window_edge, stages)
}

/// The 22-stage rejector shape used by the bundled demo: 3 classifiers in
/// the first stage, 213 in the largest, 2135 in total.
pub fn default_stage_shape() -> Vec<usize> {
    vec![
        3, 8, 14, 22, 30, 38, 47, 56, 66, 76, 86, 97, 108, 118, 130, 141, 153, 164, 176, 188,
        201, 213,
    ]
}
