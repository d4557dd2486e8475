//! Per-pair SE(3)-invariant voting parameters `(mu, nu, alpha, beta,
//! gamma)` and the predictor interface that produces them.
//!
//! For a pair with base point `p_i` and unit direction `d_hat`, and a part
//! frame with center `o`, up axis `e1` and right axis `e2`:
//!
//! ```text
//! mu    = (o - p_i) . d_hat           signed distance along the pair line
//! nu    = |(o - p_i) - mu d_hat|      distance from the pair line
//! alpha = e1 . d_hat
//! beta  = e2 . d_hat
//! gamma = per-axis scale estimate
//! ```
//!
//! These are invariant under a common rigid transform of cloud and frame.
//! The shipped implementations are a geometric oracle that evaluates the
//! formulas against ground-truth part frames, and a noisy oracle that
//! models an imperfect learned predictor: a coherent per-frame frame bias
//! whose magnitude grows with the true increment away from the keyframe
//! (predictions degrade as the quasi-canonical cloud drifts from the
//! canonical configuration), plus independent per-pair scatter that can be
//! tied to normal-parallelism (ambiguous pairs vote worse).

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::model::TruthSequence;
use crate::ppf::PointPair;
use crate::se3::Pose;
use crate::seed;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("degenerate pair ({i}, {j})")]
    DegeneratePair { i: usize, j: usize },
    #[error("frame index {frame} outside ground-truth range {len}")]
    FrameOutOfRange { frame: usize, len: usize },
    #[error("part index {part} outside ground-truth range {len}")]
    PartOutOfRange { part: usize, len: usize },
}

/// Per-pair voting payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantParams {
    pub mu: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: Vector3<f64>,
    pub weight: f64,
}

/// A part frame: center plus orthogonal up/right axes and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartFrameTruth {
    pub center: Vector3<f64>,
    /// Up orientation (unit).
    pub e1: Vector3<f64>,
    /// Right orientation (unit, orthogonal to e1).
    pub e2: Vector3<f64>,
    pub scale: Vector3<f64>,
}

impl PartFrameTruth {
    /// Frame as a pose. Columns map the canonical axes: right `e2` is the
    /// image of +x, up `e1` of +y, and `e2 x e1` of +z.
    pub fn pose(&self) -> Pose {
        let e3 = self.e2.cross(&self.e1);
        Pose::new(
            Matrix3::from_columns(&[self.e2, self.e1, e3]),
            self.center,
        )
    }

    pub fn from_pose(pose: &Pose, scale: Vector3<f64>) -> Self {
        Self {
            center: *pose.translation(),
            e1: pose.rotation().column(1).into_owned(),
            e2: pose.rotation().column(0).into_owned(),
            scale,
        }
    }

    /// The frame seen through a rigid transform.
    pub fn transformed(&self, t: &Pose) -> Self {
        Self {
            center: t.apply(&self.center),
            e1: t.rotate(&self.e1),
            e2: t.rotate(&self.e2),
            scale: self.scale,
        }
    }
}

/// Evaluate the invariant parameters of one pair against a known part
/// frame.
pub fn oracle_params(
    pair: &PointPair,
    cloud: &PointCloud,
    truth: &PartFrameTruth,
) -> Result<InvariantParams, PredictError> {
    let p_i = cloud.position(pair.i);
    let delta = cloud.position(pair.j) - p_i;
    if delta.norm() < 1e-9 {
        return Err(PredictError::DegeneratePair {
            i: pair.i,
            j: pair.j,
        });
    }
    let to_center = truth.center - p_i;
    let mu = to_center.dot(&pair.d_hat);
    let nu = (to_center - pair.d_hat * mu).norm();
    Ok(InvariantParams {
        mu,
        nu,
        alpha: truth.e1.dot(&pair.d_hat),
        beta: truth.e2.dot(&pair.d_hat),
        gamma: truth.scale,
        weight: pair.weight,
    })
}

/// Noise model for a single parameter tuple: Gaussian on `mu` and `nu`
/// (`nu` clamped non-negative) with `sigma_trans`, Gaussian on `alpha` and
/// `beta` (clamped to `[-1, 1]`) with `sigma_dir`, and per-axis
/// multiplicative lognormal noise on `gamma` with `sigma_dir`.
/// Deterministic per seed; the identity when both sigmas are zero.
pub fn perturb_params(
    params: &InvariantParams,
    sigma_trans: f64,
    sigma_dir: f64,
    seed_value: u64,
) -> InvariantParams {
    if sigma_trans == 0.0 && sigma_dir == 0.0 {
        return *params;
    }
    let mut rng = seed::rng(seed_value, &[0x70_65_72_74]);
    let trans = Normal::new(0.0, sigma_trans.max(f64::MIN_POSITIVE)).expect("sigma >= 0");
    let dir = Normal::new(0.0, sigma_dir.max(f64::MIN_POSITIVE)).expect("sigma >= 0");
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: &Normal<f64>, active: bool| -> f64 {
        // Draw even when the channel is off so seeds stay aligned.
        let x = n.sample(rng);
        if active {
            x
        } else {
            0.0
        }
    };
    let mu = params.mu + draw(&mut rng, &trans, sigma_trans > 0.0);
    let nu = (params.nu + draw(&mut rng, &trans, sigma_trans > 0.0)).max(0.0);
    let alpha = (params.alpha + draw(&mut rng, &dir, sigma_dir > 0.0)).clamp(-1.0, 1.0);
    let beta = (params.beta + draw(&mut rng, &dir, sigma_dir > 0.0)).clamp(-1.0, 1.0);
    let gamma = Vector3::new(
        params.gamma.x * draw(&mut rng, &dir, sigma_dir > 0.0).exp(),
        params.gamma.y * draw(&mut rng, &dir, sigma_dir > 0.0).exp(),
        params.gamma.z * draw(&mut rng, &dir, sigma_dir > 0.0).exp(),
    );
    InvariantParams {
        mu,
        nu,
        alpha,
        beta,
        gamma,
        weight: params.weight,
    }
}

/// What the tracker knows when it asks for predictions: the frame being
/// processed, the part, and the frame index of the current keyframe. The
/// cloud handed over is the quasi-canonicalized part cloud.
#[derive(Debug, Clone, Copy)]
pub struct PredictContext {
    pub frame_index: usize,
    pub part: usize,
    pub keyframe_frame_index: usize,
}

/// Produces per-pair invariant parameters for a quasi-canonicalized part
/// cloud. Implementations must keep the [`InvariantParams`] invariants
/// (`nu >= 0`, `|alpha| <= 1`, `|beta| <= 1`, positive `gamma`).
pub trait Predictor {
    fn predict(
        &self,
        pairs: &[PointPair],
        cloud: &PointCloud,
        ctx: &PredictContext,
    ) -> Result<Vec<InvariantParams>, PredictError>;
}

/// Ground-truth geometric predictor.
///
/// The target frame is the part's canonical frame carried by the true
/// increment since the keyframe (`delta = T_kf^-1 * T_t`), which is
/// exactly what a perfectly trained network would output for the
/// quasi-canonical cloud.
pub struct OraclePredictor {
    truth: TruthSequence,
    part_frames: Vec<Pose>,
}

impl OraclePredictor {
    pub fn new(truth: TruthSequence, part_frames: Vec<Pose>) -> Self {
        Self { truth, part_frames }
    }

    /// Part frame in the voting (quasi-canonical) space, and the
    /// magnitude of the true increment since the keyframe.
    fn target_frame(&self, ctx: &PredictContext) -> Result<(PartFrameTruth, f64), PredictError> {
        let frames = self.truth.poses.len();
        for f in [ctx.frame_index, ctx.keyframe_frame_index] {
            if f >= frames {
                return Err(PredictError::FrameOutOfRange {
                    frame: f,
                    len: frames,
                });
            }
        }
        let parts = self.truth.poses[ctx.frame_index].len();
        if ctx.part >= parts {
            return Err(PredictError::PartOutOfRange {
                part: ctx.part,
                len: parts,
            });
        }
        let t_kf = &self.truth.poses[ctx.keyframe_frame_index][ctx.part];
        let t_cur = &self.truth.poses[ctx.frame_index][ctx.part];
        let delta = t_kf.inverse().compose(t_cur);
        let magnitude = match delta.log() {
            Ok(xi) => xi.magnitude(),
            Err(_) => delta.angle() + delta.translation().norm(),
        };
        let scale = self.truth.scales[ctx.frame_index][ctx.part];
        let frame =
            PartFrameTruth::from_pose(&delta.compose(&self.part_frames[ctx.part]), scale);
        Ok((frame, magnitude))
    }
}

impl Predictor for OraclePredictor {
    fn predict(
        &self,
        pairs: &[PointPair],
        cloud: &PointCloud,
        ctx: &PredictContext,
    ) -> Result<Vec<InvariantParams>, PredictError> {
        let (frame, _) = self.target_frame(ctx)?;
        pairs
            .iter()
            .map(|pair| oracle_params(pair, cloud, &frame))
            .collect()
    }
}

/// Noise settings for [`NoisyOraclePredictor`].
#[derive(Debug, Clone, Copy)]
pub struct NoiseConfig {
    /// Std-dev of the coherent center bias (meters).
    pub sigma_trans: f64,
    /// Std-dev of the coherent orientation bias (radians) and of the
    /// lognormal scale bias.
    pub sigma_dir: f64,
    /// Growth of the bias with the true increment magnitude since the
    /// keyframe: `sigma_eff = sigma * (1 + drift_gain * |log delta|)`.
    pub drift_gain: f64,
    /// Fraction of the sigmas applied as independent per-pair scatter.
    pub pair_scatter: f64,
    /// Extra per-pair scatter proportional to `|cos theta_ij|` of the pair
    /// normals; models the ambiguity of near-parallel-normal pairs.
    pub ambiguity_gain: f64,
}

impl NoiseConfig {
    pub fn quiet() -> Self {
        Self {
            sigma_trans: 0.0,
            sigma_dir: 0.0,
            drift_gain: 0.0,
            pair_scatter: 0.0,
            ambiguity_gain: 0.0,
        }
    }
}

/// Oracle plus the noise model described in the module docs.
pub struct NoisyOraclePredictor {
    oracle: OraclePredictor,
    noise: NoiseConfig,
    seed: u64,
}

impl NoisyOraclePredictor {
    pub fn new(oracle: OraclePredictor, noise: NoiseConfig, seed_value: u64) -> Self {
        Self {
            oracle,
            noise,
            seed: seed_value,
        }
    }
}

impl Predictor for NoisyOraclePredictor {
    fn predict(
        &self,
        pairs: &[PointPair],
        cloud: &PointCloud,
        ctx: &PredictContext,
    ) -> Result<Vec<InvariantParams>, PredictError> {
        let (frame, magnitude) = self.oracle.target_frame(ctx)?;
        let grow = 1.0 + self.noise.drift_gain * magnitude;
        let sigma_t = self.noise.sigma_trans * grow;
        let sigma_d = self.noise.sigma_dir * grow;

        // Coherent per-(frame, part) bias: shift the target frame once and
        // derive every pair's parameters from the biased frame.
        let mut bias_rng = seed::rng(
            self.seed,
            &[0xb1a5, ctx.frame_index as u64, ctx.part as u64],
        );
        let gauss3 = |rng: &mut rand_chacha::ChaCha8Rng, sigma: f64| -> Vector3<f64> {
            let n = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("sigma >= 0");
            let v = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            if sigma > 0.0 {
                v
            } else {
                Vector3::zeros()
            }
        };
        let center_bias = gauss3(&mut bias_rng, sigma_t);
        let rot_bias = crate::se3::Pose::exp(&crate::se3::Twist::new(
            gauss3(&mut bias_rng, sigma_d),
            Vector3::zeros(),
        ));
        let scale_bias = gauss3(&mut bias_rng, self.noise.sigma_dir);
        let biased = PartFrameTruth {
            center: frame.center + center_bias,
            e1: rot_bias.rotate(&frame.e1),
            e2: rot_bias.rotate(&frame.e2),
            scale: Vector3::new(
                frame.scale.x * scale_bias.x.exp(),
                frame.scale.y * scale_bias.y.exp(),
                frame.scale.z * scale_bias.z.exp(),
            ),
        };

        pairs
            .iter()
            .enumerate()
            .map(|(idx, pair)| {
                let params = oracle_params(pair, cloud, &biased)?;
                let parallel = cloud
                    .normal(pair.i)
                    .dot(cloud.normal(pair.j))
                    .clamp(-1.0, 1.0)
                    .abs();
                let scatter = self.noise.pair_scatter + self.noise.ambiguity_gain * parallel;
                Ok(perturb_params(
                    &params,
                    self.noise.sigma_trans * scatter,
                    self.noise.sigma_dir * scatter,
                    seed::derive(
                        self.seed,
                        &[
                            0x5ca7,
                            ctx.frame_index as u64,
                            ctx.part as u64,
                            idx as u64,
                        ],
                    ),
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppf::{sample_pairs, DEFAULT_LAMBDA};
    use crate::se3::Twist;

    fn simple_cloud() -> PointCloud {
        let positions = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.3, -0.4, 0.8),
        ];
        let n = positions.len();
        PointCloud::new(positions, vec![Vector3::z(); n], vec![0; n]).unwrap()
    }

    fn identity_frame() -> PartFrameTruth {
        PartFrameTruth {
            center: Vector3::zeros(),
            e1: Vector3::y(),
            e2: Vector3::x(),
            scale: Vector3::new(1.0, 0.5, 0.25),
        }
    }

    fn pair(cloud: &PointCloud, i: usize, j: usize) -> PointPair {
        let d = (cloud.position(j) - cloud.position(i)).normalize();
        PointPair {
            i,
            j,
            d_hat: d,
            weight: 1.0,
        }
    }

    #[test]
    fn hand_evaluated_collinear_pair() {
        let cloud = simple_cloud();
        let p = pair(&cloud, 0, 1);
        let params = oracle_params(&p, &cloud, &identity_frame()).unwrap();
        assert!((params.mu - (-1.0)).abs() < 1e-12);
        assert!(params.nu.abs() < 1e-12);
        assert!((params.alpha - 0.0).abs() < 1e-12);
        assert!((params.beta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_offset_gives_zero_mu() {
        // d_hat = +z from p_i = (1,0,0); center at origin is orthogonal to
        // the line direction offset.
        let positions = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 1.0)];
        let cloud = PointCloud::new(positions, vec![Vector3::z(); 2], vec![0; 2]).unwrap();
        let p = pair(&cloud, 0, 1);
        let params = oracle_params(&p, &cloud, &identity_frame()).unwrap();
        assert!(params.mu.abs() < 1e-12);
        assert!((params.nu - 1.0).abs() < 1e-12);
        // e1 = +y is orthogonal to d_hat = +z.
        assert!(params.alpha.abs() < 1e-12);
    }

    #[test]
    fn mu_nu_consistency_on_clean_data() {
        let cloud = simple_cloud();
        let frame = identity_frame();
        let pairs = sample_pairs(&cloud, 50, DEFAULT_LAMBDA, 3).unwrap();
        for p in &pairs {
            let params = oracle_params(&p, &cloud, &frame).unwrap();
            let d2 = (frame.center - cloud.position(p.i)).norm_squared();
            assert!((params.mu * params.mu + params.nu * params.nu - d2).abs() < 1e-9);
            assert!(params.nu >= 0.0);
            assert!(params.alpha.abs() <= 1.0 + 1e-12);
            assert!(params.beta.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn params_are_rigid_invariant() {
        let cloud = simple_cloud();
        let frame = identity_frame();
        let mut rng = seed::rng(31, &[]);
        for _ in 0..200 {
            let t = Pose::exp(&Twist::new(
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            ));
            let moved = cloud.transformed(&t);
            let moved_frame = frame.transformed(&t);
            for (i, j) in [(0usize, 1usize), (0, 2), (2, 3)] {
                let a = oracle_params(&pair(&cloud, i, j), &cloud, &frame).unwrap();
                let b = oracle_params(&pair(&moved, i, j), &moved, &moved_frame).unwrap();
                assert!((a.mu - b.mu).abs() < 1e-9);
                assert!((a.nu - b.nu).abs() < 1e-9);
                assert!((a.alpha - b.alpha).abs() < 1e-9);
                assert!((a.beta - b.beta).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn swapping_flips_mu_base_and_keeps_nu() {
        let cloud = simple_cloud();
        let frame = identity_frame();
        let fwd = oracle_params(&pair(&cloud, 2, 3), &cloud, &frame).unwrap();
        let rev = oracle_params(&pair(&cloud, 3, 2), &cloud, &frame).unwrap();
        // nu is the center-to-line distance, identical for both orderings.
        assert!((fwd.nu - rev.nu).abs() < 1e-12);
        // mu changes base point and direction sign consistently.
        let d = (cloud.position(3) - cloud.position(2)).normalize();
        let expected_rev = (frame.center - cloud.position(3)).dot(&(-d));
        assert!((rev.mu - expected_rev).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pair_is_rejected() {
        let positions = vec![Vector3::zeros(), Vector3::zeros()];
        let cloud = PointCloud::new(positions, vec![Vector3::z(); 2], vec![0; 2]).unwrap();
        let p = PointPair {
            i: 0,
            j: 1,
            d_hat: Vector3::x(),
            weight: 1.0,
        };
        assert!(matches!(
            oracle_params(&p, &cloud, &identity_frame()),
            Err(PredictError::DegeneratePair { .. })
        ));
    }

    #[test]
    fn perturb_with_zero_sigma_is_identity() {
        let params = InvariantParams {
            mu: 0.3,
            nu: 0.1,
            alpha: -0.2,
            beta: 0.9,
            gamma: Vector3::new(1.0, 0.5, 0.25),
            weight: 0.8,
        };
        assert_eq!(perturb_params(&params, 0.0, 0.0, 7), params);
    }

    #[test]
    fn perturb_clamps_nu_and_direction_cosines() {
        let params = InvariantParams {
            mu: 0.0,
            nu: 0.0,
            alpha: 1.0,
            beta: -1.0,
            gamma: Vector3::repeat(1.0),
            weight: 1.0,
        };
        for s in 0..1000u64 {
            let p = perturb_params(&params, 0.01, 0.3, s);
            assert!(p.nu >= 0.0);
            assert!(p.alpha.abs() <= 1.0);
            assert!(p.beta.abs() <= 1.0);
            assert!(p.gamma.x > 0.0 && p.gamma.y > 0.0 && p.gamma.z > 0.0);
        }
    }

    #[test]
    fn perturb_mu_stddev_matches_sigma() {
        let params = InvariantParams {
            mu: 0.0,
            nu: 1.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: Vector3::repeat(1.0),
            weight: 1.0,
        };
        let sigma = 0.05;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for s in 0..n {
            let p = perturb_params(&params, sigma, 0.0, s as u64);
            sum += p.mu;
            sum2 += p.mu * p.mu;
        }
        let mean = sum / n as f64;
        let std = (sum2 / n as f64 - mean * mean).sqrt();
        assert!(
            (std - sigma).abs() / sigma < 0.02,
            "empirical sigma {std:.5}"
        );
    }

    fn static_truth(frames: usize) -> (TruthSequence, Vec<Pose>) {
        let poses = vec![vec![Pose::identity()]; frames];
        let scales = vec![vec![Vector3::new(1.0, 0.5, 0.25)]; frames];
        (TruthSequence { poses, scales }, vec![Pose::identity()])
    }

    #[test]
    fn noisy_oracle_with_zero_noise_equals_oracle() {
        let cloud = simple_cloud();
        let pairs = sample_pairs(&cloud, 20, DEFAULT_LAMBDA, 5).unwrap();
        let ctx = PredictContext {
            frame_index: 1,
            part: 0,
            keyframe_frame_index: 0,
        };
        let (truth, frames) = static_truth(3);
        let oracle = OraclePredictor::new(truth.clone(), frames.clone());
        let clean = oracle.predict(&pairs, &cloud, &ctx).unwrap();
        let noisy = NoisyOraclePredictor::new(
            OraclePredictor::new(truth, frames),
            NoiseConfig::quiet(),
            42,
        );
        let quiet = noisy.predict(&pairs, &cloud, &ctx).unwrap();
        assert_eq!(clean, quiet);
    }

    #[test]
    fn noisy_oracle_respects_ranges_across_seeds() {
        let cloud = simple_cloud();
        let pairs = sample_pairs(&cloud, 10, DEFAULT_LAMBDA, 6).unwrap();
        let ctx = PredictContext {
            frame_index: 1,
            part: 0,
            keyframe_frame_index: 0,
        };
        let noise = NoiseConfig {
            sigma_trans: 0.05,
            sigma_dir: 0.2,
            drift_gain: 1.0,
            pair_scatter: 1.0,
            ambiguity_gain: 2.0,
        };
        for s in 0..1000u64 {
            let (truth, frames) = static_truth(3);
            let pred = NoisyOraclePredictor::new(OraclePredictor::new(truth, frames), noise, s);
            for p in pred.predict(&pairs, &cloud, &ctx).unwrap() {
                assert!(p.nu >= 0.0);
                assert!(p.alpha.abs() <= 1.0);
                assert!(p.beta.abs() <= 1.0);
                assert!(p.gamma.min() > 0.0);
            }
        }
    }

    #[test]
    fn frame_pose_round_trip() {
        let frame = identity_frame();
        let pose = frame.pose();
        assert!((pose.matrix() - nalgebra::Matrix4::identity()).amax() < 1e-12);
        let back = PartFrameTruth::from_pose(&pose, frame.scale);
        assert_eq!(back, frame);
    }
}
