//! Cross-layer low-rank estimation of activations.
//!
//! Given the previous layer's activation `Y_prev` at the same position, the
//! current one is estimated as `b·Y_prev + LR_r(Y − b·Y_prev)` and compared
//! with the direct truncation `LR_r(Y)`. Includes the closed-form scale that
//! certifies the cross estimate beats direct truncation when adjacent
//! activations are highly aligned and `r` is below `(1−ε)²·φ(Y_prev)`.

use crate::error::{invalid, Error, Result};
use crate::model::{forward, Arch, CacheMode, Params, POSITIONS};
use crate::tensor::{low_rank_approx, spectral_norm, stable_rank, write_matrix, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const DEFAULT_BETA0_GRID: [f64; 9] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 3.0, 5.0];

/// `beta0·Y_prev + LR_r(Y_curr − beta0·Y_prev)`.
pub fn estimate_cross(y_prev: &Matrix, y_curr: &Matrix, beta0: f64, r: usize) -> Result<Matrix> {
    let resid = Matrix::axpy(-beta0, y_prev, y_curr)?;
    Matrix::axpy(beta0, y_prev, &low_rank_approx(&resid, r)?)
}

/// `‖est − truth‖_F / ‖truth‖_F`.
pub fn relative_error(truth: &Matrix, est: &Matrix) -> Result<f64> {
    let norm = truth.frob_norm();
    if norm == 0.0 {
        return Err(invalid("relative error against a zero matrix is undefined"));
    }
    Ok(est.sub(truth)?.frob_norm() / norm)
}

/// `<a, b>_F / (‖a‖_F ‖b‖_F)`.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    let denom = a.frob_norm() * b.frob_norm();
    if denom == 0.0 {
        return Err(invalid("cosine similarity with a zero matrix is undefined"));
    }
    Ok((a.frob_inner(b)? / denom).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta0: f64,
    pub rel_err: f64,
}

/// Cross-estimate error at each grid point; the smallest error wins, ties
/// going to the smallest `beta0`.
pub fn beta0_sweep(
    y_prev: &Matrix,
    y_curr: &Matrix,
    r: usize,
    grid: &[f64],
) -> Result<(f64, Vec<SweepPoint>)> {
    if grid.is_empty() {
        return Err(invalid("beta0 grid is empty"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &beta0 in grid {
        let est = estimate_cross(y_prev, y_curr, beta0, r)?;
        points.push(SweepPoint {
            beta0,
            rel_err: relative_error(y_curr, &est)?,
        });
    }
    let best = points
        .iter()
        .min_by(|a, b| {
            a.rel_err
                .total_cmp(&b.rel_err)
                .then(a.beta0.total_cmp(&b.beta0))
        })
        .expect("non-empty grid")
        .beta0;
    Ok((best, points))
}

/// `(1−ε)²·φ(Y_prev)`.
pub fn r0_threshold(y_prev: &Matrix, epsilon_cos: f64) -> Result<f64> {
    Ok((1.0 - epsilon_cos).powi(2) * stable_rank(y_prev)?)
}

/// Closed-form scale
/// `((1−ε)√φ − √r)·‖Y_prev‖₂·‖Y‖_F / (‖Y_prev‖_F² + r‖Y_prev‖₂²)`.
pub fn beta_star(y_prev: &Matrix, y_curr_norm_f: f64, r: f64, epsilon_cos: f64) -> Result<f64> {
    if r < 0.0 {
        return Err(invalid("rank must be non-negative"));
    }
    let fro_sq = y_prev.frob_norm_sq();
    if fro_sq == 0.0 {
        return Err(invalid("previous activation is zero"));
    }
    let s1 = spectral_norm(y_prev)?;
    let phi = fro_sq / (s1 * s1);
    let num = ((1.0 - epsilon_cos) * phi.sqrt() - r.sqrt()) * s1 * y_curr_norm_f;
    Ok(num / (fro_sq + r * s1 * s1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub n: usize,
    pub epsilon_cos: f64,
    pub seed: u64,
    pub r: usize,
    pub r0: f64,
    pub scale: f64,
    pub cosine: f64,
    pub beta_star: f64,
    /// `‖Y − Ŷ_{β*}‖_F²`.
    pub lhs: f64,
    /// `‖Y − LR_r(Y)‖_F²`.
    pub rhs: f64,
    /// `lhs <= rhs + slack·rhs`.
    pub holds: bool,
    /// False when `r >= r0` or the pair misses the cosine bound; the
    /// inequality is then reported without any claim.
    pub in_hypothesis: bool,
}

/// Relative slack for the theorem inequality.
pub const THEOREM_SLACK: f64 = 1e-9;

/// How the rank is chosen for a generated pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankChoice {
    Fixed(usize),
    /// `⌊r0 / 2⌋` of the generated pair.
    HalfThreshold,
}

const COSINE_WINDOW: f64 = 1e-3;
const BISECTION_STEPS: usize = 200;

/// `Y = c·Y_prev + η·G` with `c ~ U[0.5, 2]`, `G` Gaussian and `η` found by
/// bisection so that `cos(Y, Y_prev) ∈ [1−ε, 1−ε+1e-3]`. Returns
/// `(Y_prev, Y, c)`.
pub fn generate_aligned_pair(n: usize, epsilon_cos: f64, seed: u64) -> Result<(Matrix, Matrix, f64)> {
    if n == 0 || !(0.0..1.0).contains(&epsilon_cos) {
        return Err(invalid("need n >= 1 and epsilon in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_prev = Matrix::randn(n, n, 1.0, &mut rng);
    let c: f64 = rng.random_range(0.5..=2.0);
    let base = y_prev.scale(c);
    if epsilon_cos == 0.0 {
        return Ok((y_prev, base, c));
    }
    let target = 1.0 - epsilon_cos;
    for _attempt in 0..8 {
        let g = Matrix::randn(n, n, 1.0, &mut rng);
        let cos_at = |eta: f64| -> Result<f64> {
            cosine_similarity(&Matrix::axpy(eta, &g, &base)?, &y_prev)
        };
        let mut lo = 0.0;
        let mut hi = base.frob_norm() / g.frob_norm().max(f64::MIN_POSITIVE);
        let mut grow = 0;
        while cos_at(hi)? >= target {
            hi *= 2.0;
            grow += 1;
            if grow > 60 {
                break;
            }
        }
        for _ in 0..BISECTION_STEPS {
            let cl = cos_at(lo)?;
            if cl <= target + COSINE_WINDOW {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if cos_at(mid)? >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let cos = cos_at(lo)?;
        if cos >= target && cos <= target + COSINE_WINDOW {
            let y = Matrix::axpy(lo, &g, &base)?;
            return Ok((y_prev, y, c));
        }
    }
    Err(invalid(format!(
        "could not generate a pair with cosine in [{target}, {}] (n={n}, seed={seed})",
        target + COSINE_WINDOW
    )))
}

/// Evaluates both sides of the inequality for a given pair and rank.
pub fn theorem_check_pair(y_prev: &Matrix, y: &Matrix, epsilon_cos: f64, r: usize) -> Result<(f64, f64, f64)> {
    let beta = beta_star(y_prev, y.frob_norm(), r as f64, epsilon_cos)?;
    let lhs = y.sub(&estimate_cross(y_prev, y, beta, r)?)?.frob_norm_sq();
    let rhs = y.sub(&low_rank_approx(y, r)?)?.frob_norm_sq();
    Ok((beta, lhs, rhs))
}

pub fn theorem_check(n: usize, epsilon_cos: f64, rank: RankChoice, seed: u64) -> Result<TheoremReport> {
    let (y_prev, y, scale) = generate_aligned_pair(n, epsilon_cos, seed)?;
    let r0 = r0_threshold(&y_prev, epsilon_cos)?;
    let r = match rank {
        RankChoice::Fixed(r) => r,
        RankChoice::HalfThreshold => (r0 / 2.0).floor() as usize,
    };
    if r > n {
        return Err(invalid(format!("rank {r} exceeds n = {n}")));
    }
    let cosine = cosine_similarity(&y, &y_prev)?;
    let (beta, lhs, rhs) = theorem_check_pair(&y_prev, &y, epsilon_cos, r)?;
    let in_hypothesis = r > 0 && (r as f64) < r0 && cosine >= 1.0 - epsilon_cos;
    Ok(TheoremReport {
        n,
        epsilon_cos,
        seed,
        r,
        r0,
        scale,
        cosine,
        beta_star: beta,
        lhs,
        rhs,
        holds: lhs <= rhs + THEOREM_SLACK * rhs.max(1.0),
        in_hypothesis,
    })
}

/// Per-(layer, position) statistics of one activation pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub layer: usize,
    pub position: String,
    pub r: usize,
    pub beta0: f64,
    pub rel_err_direct: f64,
    pub rel_err_cross: f64,
    pub cosine_sim: f64,
    pub stable_rank_prev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationAnalysis {
    pub rows: Vec<ResidualStats>,
    pub mean_rel_err_direct: f64,
    pub mean_rel_err_cross: f64,
    /// One `beta0` for every pair, minimising the mean cross error.
    pub global_beta0: f64,
    pub mean_rel_err_cross_global: f64,
}

/// Analyses `Y_{l-1}^P → Y_l^P` for `l = 2..=L` and every position on a
/// full-rank model. Each activation stacks the rows of every sequence.
pub fn analyze_activations(
    params: &Params,
    sequences: &[Vec<usize>],
    r_fraction: f64,
    grid: &[f64],
) -> Result<ActivationAnalysis> {
    let cfg = &params.config;
    if cfg.arch != Arch::FullRank {
        return Err(invalid(
            "activation analysis needs the full-rank architecture; cross-layer models are low-rank residual by construction",
        ));
    }
    if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
        return Err(invalid("corpus sample is empty"));
    }
    if !(r_fraction > 0.0) {
        return Err(invalid("rank fraction must be positive"));
    }
    let acts = collect_activations(params, sequences)?;
    let rank = ((r_fraction * cfg.hidden as f64).round() as usize).max(1);

    let mut rows = Vec::new();
    let mut sweeps = Vec::new();
    for l in 2..=cfg.layers {
        for (p, pos) in POSITIONS.iter().enumerate() {
            let prev = &acts[l - 2][p];
            let cur = &acts[l - 1][p];
            let r = rank.min(cur.rows().min(cur.cols()));
            let direct = relative_error(cur, &low_rank_approx(cur, r)?)?;
            let (best, points) = beta0_sweep(prev, cur, r, grid)?;
            let cross = points
                .iter()
                .find(|pt| pt.beta0 == best)
                .expect("best is a grid point")
                .rel_err;
            rows.push(ResidualStats {
                layer: l,
                position: pos.name().to_string(),
                r,
                beta0: best,
                rel_err_direct: direct,
                rel_err_cross: cross,
                cosine_sim: cosine_similarity(cur, prev)?,
                stable_rank_prev: stable_rank(prev)?,
            });
            sweeps.push(points);
        }
    }
    let count = rows.len() as f64;
    let mean = |f: &dyn Fn(&ResidualStats) -> f64| rows.iter().map(f).sum::<f64>() / count;
    let mut global = (grid[0], f64::INFINITY);
    for (g, &beta0) in grid.iter().enumerate() {
        let m = sweeps.iter().map(|s| s[g].rel_err).sum::<f64>() / count;
        if m < global.1 || (m == global.1 && beta0 < global.0) {
            global = (beta0, m);
        }
    }
    Ok(ActivationAnalysis {
        mean_rel_err_direct: mean(&|r| r.rel_err_direct),
        mean_rel_err_cross: mean(&|r| r.rel_err_cross),
        global_beta0: global.0,
        mean_rel_err_cross_global: global.1,
        rows,
    })
}

/// Linear outputs of every layer, rows of all sequences stacked; index
/// `[l - 1][position]`.
pub fn collect_activations(params: &Params, sequences: &[Vec<usize>]) -> Result<Vec<Vec<Matrix>>> {
    let cfg = &params.config;
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); 7]; cfg.layers];
    let mut rows = 0;
    for seq in sequences {
        let (_, cache) = forward(params, seq, CacheMode::Full)?;
        for (l, rec) in cache.layers.iter().enumerate() {
            let y = rec.y.as_ref().expect("full cache stores outputs");
            for p in 0..7 {
                per_layer[l][p].extend_from_slice(y[p].data());
            }
        }
        rows += seq.len();
    }
    per_layer
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .enumerate()
                .map(|(p, data)| Matrix::from_vec(rows, POSITIONS[p].out_dim(cfg), data))
                .collect()
        })
        .collect()
}

pub fn write_stats_csv<W: Write>(w: &mut W, rows: &[ResidualStats]) -> Result<()> {
    writeln!(
        w,
        "layer,position,r,beta0,rel_err_direct,rel_err_cross,cosine_sim,stable_rank_prev"
    )?;
    for s in rows {
        writeln!(
            w,
            "{},{},{},{},{:e},{:e},{},{}",
            s.layer,
            s.position,
            s.r,
            s.beta0,
            s.rel_err_direct,
            s.rel_err_cross,
            s.cosine_sim,
            s.stable_rank_prev
        )?;
    }
    Ok(())
}

/// Writes `Y_l^P` for every layer and position as `y_l{l}_{P}.crmx`.
pub fn dump_activations(params: &Params, sequences: &[Vec<usize>], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let acts = collect_activations(params, sequences)?;
    let mut paths = Vec::new();
    for (l, layer) in acts.iter().enumerate() {
        for (p, m) in layer.iter().enumerate() {
            let path = dir.join(format!("y_l{}_{}.crmx", l + 1, POSITIONS[p].name()));
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            write_matrix(&mut f, m)?;
            f.flush().map_err(Error::from)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{read_matrix, svd};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn estimate_cross_cases() {
        let mut g = rng(1);
        let yp = Matrix::randn(8, 6, 1.0, &mut g);
        let yc = Matrix::randn(8, 6, 1.0, &mut g);
        assert_eq!(estimate_cross(&yp, &yc, 0.0, 2).unwrap(), low_rank_approx(&yc, 2).unwrap());
        let scaled = yp.scale(1.7);
        let est = estimate_cross(&yp, &scaled, 1.7, 1).unwrap();
        assert!(relative_error(&scaled, &est).unwrap() <= 1e-14);

        let beta0 = 0.4;
        let diff = Matrix::axpy(-beta0, &yp, &yc).unwrap();
        let tail: f64 = svd(&diff).unwrap().sigma[2..].iter().map(|s| s * s).sum();
        let err = yc.sub(&estimate_cross(&yp, &yc, beta0, 2).unwrap()).unwrap().frob_norm_sq();
        assert!((err - tail).abs() <= 1e-9 * tail);
    }

    #[test]
    fn relative_error_cases() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        assert_eq!(relative_error(&m, &m).unwrap(), 0.0);
        assert_eq!(relative_error(&m, &Matrix::zeros(2, 2)).unwrap(), 1.0);
        assert!((relative_error(&m, &m.scale(2.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!(relative_error(&Matrix::zeros(2, 2), &m).is_err());
    }

    #[test]
    fn sweep_finds_construction_scale() {
        let mut g = rng(2);
        let yp = Matrix::randn(16, 16, 1.0, &mut g);
        let noise = Matrix::randn(16, 16, 1e-4, &mut g);
        let yc = Matrix::axpy(0.6, &yp, &noise).unwrap();
        let (best, pts) = beta0_sweep(&yp, &yc, 2, &DEFAULT_BETA0_GRID).unwrap();
        assert_eq!(best, 0.6);
        assert_eq!(pts.len(), 9);
        assert_eq!(beta0_sweep(&yp, &yc, 2, &[0.0]).unwrap().0, 0.0);
        assert!(beta0_sweep(&yp, &yc, 2, &[]).is_err());
    }

    #[test]
    fn sweep_ties_go_to_smallest() {
        let yp = Matrix::zeros(3, 3);
        let yc = Matrix::identity(3);
        let (best, _) = beta0_sweep(&yp, &yc, 1, &[1.0, 0.2, 0.6]).unwrap();
        assert_eq!(best, 0.2);
    }

    #[test]
    fn sweep_beats_zero_for_aligned_pairs() {
        for seed in 0..10 {
            let (yp, yc, _) = generate_aligned_pair(24, 0.05, seed).unwrap();
            assert!(cosine_similarity(&yp, &yc).unwrap() >= 0.95);
            let (best, pts) = beta0_sweep(&yp, &yc, 3, &DEFAULT_BETA0_GRID).unwrap();
            let at_best = pts.iter().find(|p| p.beta0 == best).unwrap().rel_err;
            assert!(at_best <= pts[0].rel_err);
            let brute = pts.iter().map(|p| p.rel_err).fold(f64::INFINITY, f64::min);
            assert_eq!(at_best, brute);
        }
    }

    #[test]
    fn beta_star_cases() {
        let mut g = rng(3);
        let yp = Matrix::randn(10, 10, 1.0, &mut g);
        let eps = 0.1;
        let r0 = r0_threshold(&yp, eps).unwrap();
        assert!(beta_star(&yp, 3.0, r0, eps).unwrap().abs() <= 1e-12);

        // Identity: φ = n, ‖I‖₂ = 1, ‖I‖_F² = n, so β* = √n·‖Y‖_F / n.
        let n: f64 = 9.0;
        let b = beta_star(&Matrix::identity(9), 4.5, 0.0, 0.0).unwrap();
        assert!((b - n.sqrt() * 4.5 / n).abs() <= 1e-14);
        // With r = 4: (3 − 2)·4.5 / (9 + 4).
        let b = beta_star(&Matrix::identity(9), 4.5, 4.0, 0.0).unwrap();
        assert!((b - 4.5 / 13.0).abs() <= 1e-14);

        let mut last = f64::INFINITY;
        for r in 0..=10 {
            let b = beta_star(&yp, 2.0, r as f64, eps).unwrap();
            assert!(b < last);
            last = b;
        }
        assert!(beta_star(&Matrix::zeros(3, 3), 1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn r0_cases() {
        assert!((r0_threshold(&Matrix::identity(6), 0.0).unwrap() - 6.0).abs() < 1e-12);
        let rank1 = Matrix::from_fn(4, 4, |i, j| (i + 1) as f64 * (j + 2) as f64);
        assert!((r0_threshold(&rank1, 0.5).unwrap() - 0.25).abs() < 1e-9);
        let mut g = rng(4);
        let a = Matrix::randn(7, 7, 1.0, &mut g);
        assert!(r0_threshold(&a, 0.2).unwrap() <= stable_rank(&a).unwrap());
    }

    #[test]
    fn generator_hits_cosine_window() {
        for eps in [0.02, 0.05, 0.1] {
            let (yp, y, c) = generate_aligned_pair(32, eps, 7).unwrap();
            let cos = cosine_similarity(&y, &yp).unwrap();
            assert!(cos >= 1.0 - eps && cos <= 1.0 - eps + 1e-3, "{cos}");
            assert!((0.5..=2.0).contains(&c));
        }
    }

    #[test]
    fn identical_pair_gives_zero_error() {
        let mut g = rng(5);
        let y = Matrix::randn(12, 12, 1.0, &mut g);
        let (beta, lhs, rhs) = theorem_check_pair(&y, &y, 0.0, 0).unwrap();
        assert!((beta - 1.0).abs() <= 1e-12);
        assert!(lhs <= 1e-20 && lhs <= rhs);
    }

    #[test]
    fn oversized_rank_is_flagged() {
        let rep = theorem_check(32, 0.05, RankChoice::Fixed(30), 1).unwrap();
        assert!(rep.r as f64 > rep.r0);
        assert!(!rep.in_hypothesis);
        let rep = theorem_check(32, 0.05, RankChoice::HalfThreshold, 1).unwrap();
        assert!(rep.in_hypothesis && rep.holds);
    }

    #[test]
    fn analysis_contract() {
        let cfg = ModelConfig::uniform(3, 8, 16, 2, 2, 11, 6, Arch::FullRank);
        let params = Params::init(&cfg, 1).unwrap();
        let seqs = vec![vec![1, 2, 3, 4, 5, 6], vec![6, 5, 4, 3, 2, 1]];
        let a = analyze_activations(&params, &seqs, 0.25, &DEFAULT_BETA0_GRID).unwrap();
        assert_eq!(a.rows.len(), 2 * 7);
        let mut buf = Vec::new();
        write_stats_csv(&mut buf, &a.rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 15);
        assert!(text.starts_with(
            "layer,position,r,beta0,rel_err_direct,rel_err_cross,cosine_sim,stable_rank_prev\n"
        ));

        let full = analyze_activations(&params, &seqs, 1.0, &DEFAULT_BETA0_GRID).unwrap();
        for r in &full.rows {
            assert!(r.rel_err_direct <= 1e-9 && r.rel_err_cross <= 1e-9, "{r:?}");
        }

        let cr = ModelConfig::uniform(3, 8, 16, 2, 2, 11, 6, Arch::CrNet);
        let pc = Params::init(&cr, 1).unwrap();
        assert!(analyze_activations(&pc, &seqs, 0.25, &DEFAULT_BETA0_GRID).is_err());
    }

    #[test]
    fn dumps_round_trip() {
        let cfg = ModelConfig::uniform(2, 8, 16, 1, 2, 11, 4, Arch::FullRank);
        let params = Params::init(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_activations(&params, &[vec![1, 2, 3]], dir.path()).unwrap();
        assert_eq!(paths.len(), 14);
        let acts = collect_activations(&params, &[vec![1, 2, 3]]).unwrap();
        let bytes = std::fs::read(dir.path().join("y_l2_gate.crmx")).unwrap();
        let mut off = 0;
        let m = read_matrix(&mut bytes.as_slice(), &mut off).unwrap();
        assert_eq!(m, acts[1][4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn relative_error_is_scale_invariant(seed in 0u64..10_000, c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            let mut g = rng(seed);
            let t = Matrix::randn(4, 5, 1.0, &mut g);
            let e = Matrix::randn(4, 5, 1.0, &mut g);
            let a = relative_error(&t, &e).unwrap();
            let b = relative_error(&t.scale(c), &e.scale(c)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn zero_scale_estimate_is_plain_truncation(seed in 0u64..10_000, r in 0usize..5) {
            let mut g = rng(seed);
            let yp = Matrix::randn(5, 4, 1.0, &mut g);
            let yc = Matrix::randn(5, 4, 1.0, &mut g);
            prop_assert_eq!(estimate_cross(&yp, &yc, 0.0, r).unwrap(), low_rank_approx(&yc, r).unwrap());
        }

        #[test]
        fn theorem_inequality_holds(seed in 0u64..1_000_000, eps_idx in 0usize..3) {
            let eps = [0.02, 0.05, 0.1][eps_idx];
            let rep = theorem_check(32, eps, RankChoice::HalfThreshold, seed).unwrap();
            prop_assert!(rep.in_hypothesis);
            prop_assert!(rep.holds, "{:?}", rep);
        }
    }
}
