//! Finite-difference verification of every analytic gradient in the stack.
//!
//! For each grid configuration a random patch tensor, factor set, fully
//! connected head, and label define the scalar objective
//! `loss = xent(fc(conv_out))`. Every analytic gradient (four factor kinds,
//! the layer input, FC weights and bias, and the loss-logit gradient) is
//! compared against central differences of that objective, and the two
//! backward paths (materialized matrices vs contraction) are compared
//! against each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cp::CpFactorSet;
use crate::error::Result;
use crate::layers::{
    cpac_backward, cpac_backward_naive, cpac_forward, fc_backward, fc_forward, softmax_xent,
};
use crate::tensor::Tensor;

/// Relative-error gate for analytic vs finite differences.
pub const TOLERANCE: f64 = 1e-6;
/// Agreement gate between the naive and fast backward paths.
pub const CROSS_PATH_TOLERANCE: f64 = 1e-10;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Which analytic gradient a row checks. The four factor equations, the
/// layer-input adjoint, the fully connected parameters, and the loss
/// gradient w.r.t. the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Equation {
    KN,
    KX,
    KY,
    KS,
    Input,
    FcWeights,
    FcBias,
    Loss,
}

impl Equation {
    pub const ALL: [Equation; 8] = [
        Equation::KN,
        Equation::KX,
        Equation::KY,
        Equation::KS,
        Equation::Input,
        Equation::FcWeights,
        Equation::FcBias,
        Equation::Loss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Equation::KN => "kn",
            Equation::KX => "kx",
            Equation::KY => "ky",
            Equation::KS => "ks",
            Equation::Input => "input",
            Equation::FcWeights => "fc_weights",
            Equation::FcBias => "fc_bias",
            Equation::Loss => "loss",
        }
    }

    pub fn parse(s: &str) -> Option<Equation> {
        Equation::ALL.iter().copied().find(|e| e.name() == s)
    }
}

/// One grid entry: kernel size, channels in/out, spatial extents, rank.
#[derive(Debug, Clone, Copy)]
pub struct GridConfig {
    pub d: usize,
    pub s: usize,
    pub n: usize,
    pub x: usize,
    pub y: usize,
    pub rank: usize,
}

impl std::fmt::Display for GridConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "d={} s={} n={} input={}x{} r={}",
            self.d, self.s, self.n, self.x, self.y, self.rank
        )
    }
}

/// The default grid: 12 configurations spanning d in {1,2,3}, S in {1,2,3},
/// N in {1,4,8}, spatial extents up to 7x7, R in {1,2,4}.
pub const DEFAULT_GRID: [GridConfig; 12] = [
    GridConfig { d: 1, s: 1, n: 1, x: 3, y: 3, rank: 1 },
    GridConfig { d: 1, s: 2, n: 4, x: 4, y: 3, rank: 2 },
    GridConfig { d: 1, s: 3, n: 8, x: 2, y: 5, rank: 4 },
    GridConfig { d: 2, s: 1, n: 4, x: 5, y: 4, rank: 1 },
    GridConfig { d: 2, s: 2, n: 1, x: 4, y: 4, rank: 2 },
    GridConfig { d: 2, s: 3, n: 8, x: 5, y: 5, rank: 4 },
    GridConfig { d: 2, s: 2, n: 4, x: 6, y: 6, rank: 2 },
    GridConfig { d: 3, s: 1, n: 1, x: 5, y: 6, rank: 2 },
    GridConfig { d: 3, s: 2, n: 4, x: 6, y: 5, rank: 1 },
    GridConfig { d: 3, s: 3, n: 8, x: 7, y: 7, rank: 4 },
    GridConfig { d: 3, s: 1, n: 8, x: 7, y: 4, rank: 2 },
    GridConfig { d: 3, s: 3, n: 1, x: 4, y: 7, rank: 1 },
];

/// One checked gradient on one configuration.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub equation: Equation,
    pub config: String,
    /// Norm relative error of analytic vs central finite differences,
    /// `|a - fd| / max(|fd|, 1e-8)` in the Frobenius sense.
    pub rel_err: f64,
    /// Max abs difference between the materialized-matrix and contraction
    /// backward paths; only the four factor equations have both.
    pub naive_fast_diff: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
    pub all_pass: bool,
}

impl GradcheckReport {
    /// Worst relative error per equation across the grid.
    pub fn max_rel_err(&self, eq: Equation) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.equation == eq)
            .map(|r| r.rel_err)
            .fold(0.0, f64::max)
    }

    pub fn max_cross_path(&self, eq: Equation) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.equation == eq)
            .filter_map(|r| r.naive_fast_diff)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    /// First failing row, if any.
    pub fn first_failure(&self) -> Option<&CheckRow> {
        self.rows.iter().find(|r| !r.pass)
    }
}

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let num: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

struct Instance {
    patches: Tensor,
    factors: CpFactorSet,
    fc_weights: Tensor,
    fc_bias: Tensor,
    label: usize,
}

impl Instance {
    fn random(cfg: &GridConfig, rng: &mut ChaCha8Rng) -> Instance {
        let p_total = (cfg.x - cfg.d + 1) * (cfg.y - cfg.d + 1);
        let classes = 3;
        let rand = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
        };
        Instance {
            patches: rand(rng, &[cfg.d, cfg.d, cfg.s, p_total]),
            factors: CpFactorSet::new(
                rand(rng, &[cfg.d, cfg.rank]),
                rand(rng, &[cfg.d, cfg.rank]),
                rand(rng, &[cfg.s, cfg.rank]),
                rand(rng, &[cfg.n, cfg.rank]),
            )
            .unwrap(),
            fc_weights: rand(rng, &[p_total * cfg.n, classes]),
            fc_bias: rand(rng, &[classes]),
            label: rng.gen_range(0..classes),
        }
    }

    fn loss(&self) -> f64 {
        self.loss_with(&self.patches, &self.factors, &self.fc_weights, &self.fc_bias)
    }

    fn loss_with(
        &self,
        patches: &Tensor,
        factors: &CpFactorSet,
        fc_w: &Tensor,
        fc_b: &Tensor,
    ) -> f64 {
        let (vt, _) = cpac_forward(patches, factors).unwrap();
        let logits = fc_forward(fc_w, fc_b, &vt).unwrap();
        softmax_xent(&logits, self.label).unwrap().value
    }
}

fn bump_factor(factors: &mut CpFactorSet, eq: Equation, i: usize, delta: f64) {
    let m = match eq {
        Equation::KN => &mut factors.factors_n,
        Equation::KX => &mut factors.factors_x,
        Equation::KY => &mut factors.factors_y,
        Equation::KS => &mut factors.factors_s,
        _ => unreachable!("only factor equations perturb the factor set"),
    };
    m.data_mut()[i] += delta;
}

/// Additive corruption applied to one analytic gradient; the negative
/// control for the verification harness.
fn corrupt(target: Option<Equation>, eq: Equation, grad: &mut Tensor) {
    if target == Some(eq) {
        let bump = 1.0 + grad.frobenius_norm();
        grad.data_mut()[0] += bump;
    }
}

/// Runs the finite-difference suite over `grid`. `corrupt_target`
/// deliberately breaks one analytic gradient so the harness can prove it
/// catches regressions.
pub fn run_suite(
    grid: &[GridConfig],
    seed: u64,
    corrupt_target: Option<Equation>,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for cfg in grid {
        let inst = Instance::random(cfg, &mut rng);
        let config_name = cfg.to_string();

        // analytic chain
        let (vt, cache) = cpac_forward(&inst.patches, &inst.factors)?;
        let logits = fc_forward(&inst.fc_weights, &inst.fc_bias, &vt)?;
        let loss = softmax_xent(&logits, inst.label)?;
        let fc_grads = fc_backward(&inst.fc_weights, &vt, &loss.gradient)?;
        let fast = cpac_backward(&cache, &inst.factors, &fc_grads.grad_input)?;
        let naive = cpac_backward_naive(&cache, &inst.factors, &fc_grads.grad_input)?;

        let h = FD_STEP;
        let mut push = |equation: Equation,
                        mut analytic: Tensor,
                        fd: Vec<f64>,
                        cross: Option<f64>| {
            corrupt(corrupt_target, equation, &mut analytic);
            let err = rel_err(analytic.data(), &fd);
            let pass =
                err < TOLERANCE && cross.map_or(true, |c| c < CROSS_PATH_TOLERANCE);
            rows.push(CheckRow {
                equation,
                config: config_name.clone(),
                rel_err: err,
                naive_fast_diff: cross,
                pass,
            });
        };

        // the four factor equations
        let factor_cases: [(Equation, &Tensor, &Tensor); 4] = [
            (Equation::KN, &fast.grad_n, &naive.grad_n),
            (Equation::KX, &fast.grad_x, &naive.grad_x),
            (Equation::KY, &fast.grad_y, &naive.grad_y),
            (Equation::KS, &fast.grad_s, &naive.grad_s),
        ];
        for (eq, fast_grad, naive_grad) in factor_cases {
            let mut fd = vec![0.0; fast_grad.len()];
            for (i, slot) in fd.iter_mut().enumerate() {
                let mut plus = inst.factors.clone();
                bump_factor(&mut plus, eq, i, h);
                let mut minus = inst.factors.clone();
                bump_factor(&mut minus, eq, i, -h);
                let lp = inst.loss_with(&inst.patches, &plus, &inst.fc_weights, &inst.fc_bias);
                let lm = inst.loss_with(&inst.patches, &minus, &inst.fc_weights, &inst.fc_bias);
                *slot = (lp - lm) / (2.0 * h);
            }
            let cross = fast_grad.max_abs_diff(naive_grad);
            push(eq, fast_grad.clone(), fd, Some(cross));
        }

        // input gradient
        let mut fd = vec![0.0; inst.patches.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = inst.patches.clone();
            plus.data_mut()[i] += h;
            let mut minus = inst.patches.clone();
            minus.data_mut()[i] -= h;
            *slot = (inst.loss_with(&plus, &inst.factors, &inst.fc_weights, &inst.fc_bias)
                - inst.loss_with(&minus, &inst.factors, &inst.fc_weights, &inst.fc_bias))
                / (2.0 * h);
        }
        push(Equation::Input, fast.grad_input.clone(), fd, None);

        // fully connected weights and bias
        let mut fd = vec![0.0; inst.fc_weights.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = inst.fc_weights.clone();
            plus.data_mut()[i] += h;
            let mut minus = inst.fc_weights.clone();
            minus.data_mut()[i] -= h;
            *slot = (inst.loss_with(&inst.patches, &inst.factors, &plus, &inst.fc_bias)
                - inst.loss_with(&inst.patches, &inst.factors, &minus, &inst.fc_bias))
                / (2.0 * h);
        }
        push(Equation::FcWeights, fc_grads.grad_weights.clone(), fd, None);

        let mut fd = vec![0.0; inst.fc_bias.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = inst.fc_bias.clone();
            plus.data_mut()[i] += h;
            let mut minus = inst.fc_bias.clone();
            minus.data_mut()[i] -= h;
            *slot = (inst.loss_with(&inst.patches, &inst.factors, &inst.fc_weights, &plus)
                - inst.loss_with(&inst.patches, &inst.factors, &inst.fc_weights, &minus))
                / (2.0 * h);
        }
        push(Equation::FcBias, fc_grads.grad_bias.clone(), fd, None);

        // loss gradient w.r.t. the logits
        let mut fd = vec![0.0; logits.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            *slot = (softmax_xent(&plus, inst.label)?.value
                - softmax_xent(&minus, inst.label)?.value)
                / (2.0 * h);
        }
        push(Equation::Loss, loss.gradient.clone(), fd, None);

        // sanity: the unperturbed objective is finite
        debug_assert!(inst.loss().is_finite());
    }
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(GradcheckReport { rows, all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_passes_cleanly() {
        let report = run_suite(&DEFAULT_GRID[..4], 7, None).unwrap();
        assert!(report.all_pass, "failure: {:?}", report.first_failure());
        for eq in Equation::ALL {
            assert!(report.max_rel_err(eq) < TOLERANCE);
        }
    }

    #[test]
    fn corrupted_equation_is_caught_and_named() {
        let report = run_suite(&DEFAULT_GRID[..2], 7, Some(Equation::KY)).unwrap();
        assert!(!report.all_pass);
        let failure = report.first_failure().unwrap();
        assert_eq!(failure.equation, Equation::KY);
        assert!(!failure.config.is_empty());
        // only the corrupted equation fails
        assert!(report.rows.iter().all(|r| r.pass || r.equation == Equation::KY));
    }

    #[test]
    fn equation_names_roundtrip() {
        for eq in Equation::ALL {
            assert_eq!(Equation::parse(eq.name()), Some(eq));
        }
        assert_eq!(Equation::parse("nope"), None);
    }
}
