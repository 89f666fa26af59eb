//! Per-state maximisation problems over the probability simplex.

use crate::error::{Error, Result};

/// Relative slack used when deciding whether two objective coefficients tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

const BISECTION_STEPS: usize = 400;

fn ties(a: f64, best: f64) -> bool {
    a >= best - TIE_TOLERANCE * best.abs().max(1.0)
}

/// `KL(p || q)`, infinite when `q` drops mass that `p` carries.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pa, _)| pa > 0.0)
        .map(|(&pa, &qa)| if qa > 0.0 { pa * (pa / qa).ln() } else { f64::INFINITY })
        .sum()
}

/// Maximiser of `<pi, h>` over the simplex. Keeps `p` when its whole support already
/// attains the maximum, otherwise puts all mass on the lowest-index maximiser.
pub fn greedy_row(p: &[f64], h: &[f64]) -> Vec<f64> {
    let best = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if p.iter().zip(h).all(|(&pa, &ha)| pa == 0.0 || ties(ha, best)) {
        return p.to_vec();
    }
    let a = h.iter().position(|&x| ties(x, best)).expect("non-empty row");
    let mut out = vec![0.0; p.len()];
    out[a] = 1.0;
    out
}

/// Maximiser of `<pi, h> - c * KL(p || pi)` over the simplex, `c >= 0`.
///
/// On the support of `p` the optimum is `pi_a = c p_a / (lambda - h_a)`; the multiplier is found
/// by bisection. Actions outside the support take the leftover mass only when their coefficient
/// beats the multiplier.
pub fn kl_prox_row(p: &[f64], h: &[f64], c: f64, tol: f64) -> Result<Vec<f64>> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("penalty coefficient {c} must be finite and non-negative")));
    }
    if c == 0.0 {
        return Ok(greedy_row(p, h));
    }
    let support_max = p
        .iter()
        .zip(h)
        .filter(|(&pa, _)| pa > 0.0)
        .map(|(_, &ha)| ha)
        .fold(f64::NEG_INFINITY, f64::max);
    // parametrise the multiplier as support_max + t so small penalties keep full precision
    let gaps: Vec<f64> = h.iter().map(|&ha| support_max - ha).collect();
    let mass = |t: f64| -> f64 {
        p.iter()
            .zip(&gaps)
            .filter(|(&pa, _)| pa > 0.0)
            .map(|(&pa, &ga)| c * pa / (t + ga))
            .sum()
    };
    let (mut lo, mut hi) = (0.0, c);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = hi;

    let outside = p
        .iter()
        .zip(h)
        .enumerate()
        .filter(|(_, (&pa, _))| pa == 0.0)
        .fold(None, |best: Option<(usize, f64)>, (a, (_, &ha))| match best {
            Some((_, b)) if b >= ha => best,
            _ => Some((a, ha)),
        });
    let mut out = vec![0.0; p.len()];
    match outside {
        Some((a_star, h_star)) if h_star - support_max > t => {
            let t = h_star - support_max;
            let mut used = 0.0;
            for (a, (&pa, &ga)) in p.iter().zip(&gaps).enumerate() {
                if pa > 0.0 {
                    out[a] = c * pa / (t + ga);
                    used += out[a];
                }
            }
            out[a_star] = (1.0 - used).max(0.0);
        }
        _ => {
            let total = mass(t);
            if (total - 1.0).abs() > tol.max(1e-12) {
                return Err(Error::NonConvergence {
                    what: "kl proximal multiplier search",
                    residual: (total - 1.0).abs(),
                    iterations: BISECTION_STEPS,
                });
            }
            for (a, (&pa, &ga)) in p.iter().zip(&gaps).enumerate() {
                if pa > 0.0 {
                    out[a] = c * pa / (t + ga) / total;
                }
            }
        }
    }
    Ok(out)
}

/// One linear piece of a separable concave objective: action `action` may receive up to
/// `capacity` further mass at marginal value `slope`. `rank` orders pieces of equal slope
/// (lower first).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub action: usize,
    pub capacity: f64,
    pub slope: f64,
    pub rank: u8,
}

/// Maximises a separable concave piecewise-linear objective over the simplex by filling the
/// steepest pieces first. Each action's pieces must be listed with non-increasing slopes.
pub fn fill_segments(n_actions: usize, segments: &[Segment]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&x, &y| {
        let (a, b) = (&segments[x], &segments[y]);
        b.slope
            .partial_cmp(&a.slope)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.rank.cmp(&b.rank))
            .then(a.action.cmp(&b.action))
            .then(x.cmp(&y))
    });
    let mut out = vec![0.0; n_actions];
    let mut left = 1.0;
    for i in order {
        if left <= 0.0 {
            break;
        }
        let take = segments[i].capacity.max(0.0).min(left);
        out[segments[i].action] += take;
        left -= take;
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// Outcome of [`exponentiated_gradient`].
#[derive(Clone, Debug, PartialEq)]
pub struct MirrorAscent {
    pub row: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Largest deviation of the gradient from its policy average on the support at the end.
    pub stationarity: f64,
}

fn stationarity(row: &[f64], grad: &[f64]) -> f64 {
    let avg: f64 = row.iter().zip(grad).map(|(p, g)| p * g).sum();
    row.iter()
        .zip(grad)
        .filter(|(&p, _)| p > 0.0)
        .map(|(_, &g)| (g - avg).abs())
        .fold(0.0, f64::max)
}

/// Mirror ascent on the simplex under the entropy mirror map, starting at `start`.
///
/// The step is normalised by the gradient's sup-norm. The best iterate is returned, and `start`
/// itself is returned if nothing beats it.
pub fn exponentiated_gradient(
    start: &[f64],
    objective: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    step: f64,
    max_iters: usize,
    tol: f64,
) -> MirrorAscent {
    let mut row = start.to_vec();
    let mut best = (row.clone(), objective(&row));
    let mut grad = gradient(&row);
    let mut gap = stationarity(&row, &grad);
    let mut iterations = 0;
    while iterations < max_iters && gap > tol {
        let scale = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs())).max(f64::MIN_POSITIVE);
        let shift = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut next: Vec<f64> = row
            .iter()
            .zip(&grad)
            .map(|(&p, &g)| if p > 0.0 { p * (step * (g - shift) / scale).exp() } else { 0.0 })
            .collect();
        let z: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= z);
        row = next;
        iterations += 1;
        let value = objective(&row);
        if value > best.1 {
            best = (row.clone(), value);
        }
        grad = gradient(&row);
        gap = stationarity(&row, &grad);
    }
    let final_gap = stationarity(&best.0, &gradient(&best.0));
    MirrorAscent {
        row: best.0,
        value: best.1,
        iterations,
        stationarity: final_gap.min(gap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prox_value(p: &[f64], h: &[f64], c: f64, x: &[f64]) -> f64 {
        x.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() - c * kl(p, x)
    }

    #[test]
    fn kl_of_known_pair() {
        let v = kl(&[0.75, 0.25], &[0.5, 0.5]);
        assert!((v - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn greedy_keeps_tied_support() {
        assert_eq!(greedy_row(&[0.5, 0.5, 0.0], &[1.0, 1.0, 0.0]), vec![0.5, 0.5, 0.0]);
        assert_eq!(greedy_row(&[0.5, 0.5, 0.0], &[1.0, 0.0, 1.0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn prox_matches_closed_form_for_two_actions() {
        // optimum satisfies h0 + c p0/x0 = h1 + c p1/x1
        let (p, h, c) = ([0.3, 0.7], [1.0, 0.2], 0.5);
        let x = kl_prox_row(&p, &h, c, 1e-12).unwrap();
        let lhs = h[0] + c * p[0] / x[0];
        let rhs = h[1] + c * p[1] / x[1];
        assert!((lhs - rhs).abs() < 1e-9);
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn prox_beats_perturbations() {
        let p = [0.2, 0.5, 0.3];
        let h = [0.4, -0.1, 0.9];
        let c = 0.7;
        let x = kl_prox_row(&p, &h, c, 1e-12).unwrap();
        let best = prox_value(&p, &h, c, &x);
        for d in [[1e-4, -1e-4, 0.0], [0.0, 1e-4, -1e-4], [-1e-4, 0.0, 1e-4]] {
            for sign in [-1.0, 1.0] {
                let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + sign * b).collect();
                assert!(prox_value(&p, &h, c, &y) <= best + 1e-15);
            }
        }
    }

    #[test]
    fn prox_reaches_outside_support_when_worthwhile() {
        let x = kl_prox_row(&[0.5, 0.5, 0.0], &[0.0, 0.0, 10.0], 1.0, 1e-12).unwrap();
        assert!(x[2] > 0.8);
        let y = kl_prox_row(&[0.5, 0.5, 0.0], &[0.0, 0.0, 0.1], 1.0, 1e-12).unwrap();
        assert_eq!(y[2], 0.0);
    }

    #[test]
    fn huge_penalty_returns_old_row() {
        let p = [0.1, 0.6, 0.3];
        let x = kl_prox_row(&p, &[5.0, -2.0, 1.0], 1e12, 1e-12).unwrap();
        for (a, b) in x.iter().zip(&p) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn segments_fill_steepest_first() {
        let segs = [
            Segment { action: 0, capacity: 0.4, slope: 1.0, rank: 0 },
            Segment { action: 0, capacity: 0.6, slope: -1.0, rank: 1 },
            Segment { action: 1, capacity: 0.5, slope: 0.5, rank: 0 },
            Segment { action: 1, capacity: 0.5, slope: 0.0, rank: 1 },
        ];
        assert_eq!(fill_segments(2, &segs), vec![0.4, 0.6]);
    }

    #[test]
    fn mirror_ascent_approaches_prox_solution() {
        let p = [0.2, 0.5, 0.3];
        let h = [0.4, -0.1, 0.9];
        let c = 0.7;
        let exact = kl_prox_row(&p, &h, c, 1e-12).unwrap();
        let run = exponentiated_gradient(
            &p,
            |x| prox_value(&p, &h, c, x),
            |x| x.iter().zip(&p).zip(&h).map(|((xa, pa), ha)| ha + c * pa / xa).collect(),
            0.1,
            20_000,
            1e-10,
        );
        for (a, b) in run.row.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-8, "{:?} vs {:?}", run.row, exact);
        }
    }
}
