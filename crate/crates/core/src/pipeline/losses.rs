//! Training losses on composited rays.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::envmap::EnvironmentMap;
use crate::nelf::{Tape, Var};

/// Depth errors are divided by this many meters.
pub const DEPTH_NORMALIZER: f64 = 0.2;
/// Rays count as foreground for the depth loss above this ground-truth alpha.
pub const DEPTH_ALPHA_THRESHOLD: f64 = 0.5;

/// Ground truth for a set of rays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayTargets {
    /// `3 × rays`, interleaved.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RayTargets {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn push(&mut self, rgb: [f64; 3], alpha: f64, depth: f64) {
        self.rgb.extend_from_slice(&rgb);
        self.alpha.push(alpha);
        self.depth.push(depth);
    }

    pub fn foreground(&self) -> usize {
        self.alpha
            .iter()
            .filter(|a| **a > DEPTH_ALPHA_THRESHOLD)
            .count()
    }

    pub fn range(&self, start: usize, end: usize) -> RayTargets {
        RayTargets {
            rgb: self.rgb[start * 3..end * 3].to_vec(),
            alpha: self.alpha[start..end].to_vec(),
            depth: self.depth[start..end].to_vec(),
        }
    }
}

/// Normalising counts over the whole batch, so a batch may be split into
/// chunks whose losses add up to the batch loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossNorm {
    pub rays: usize,
    pub foreground: usize,
}

impl LossNorm {
    pub fn of(targets: &RayTargets) -> Self {
        Self {
            rays: targets.len(),
            foreground: targets.foreground(),
        }
    }
}

/// Tape handles of the three image losses.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub color: Var,
    pub alpha: Var,
    pub depth: Option<Var>,
    pub total: Var,
}

/// `L_c + L_a + L_d` on composited rays (`rays × [r, g, b, depth, alpha]`):
/// mean absolute color and alpha error, and mean absolute depth error over
/// foreground rays divided by [`DEPTH_NORMALIZER`].
pub fn ray_losses(
    tape: &mut Tape<'_>,
    rendered: Var,
    targets: &RayTargets,
    norm: LossNorm,
) -> LossNodes {
    let rgb = tape.slice(rendered, 0, 3);
    let depth = tape.slice(rendered, 3, 1);
    let alpha = tape.slice(rendered, 4, 1);
    let n = norm.rays.max(1) as f64;
    let color = tape.l1(rgb, Rc::from(targets.rgb.as_slice()), None, 1.0 / (3.0 * n));
    let alpha = tape.l1(alpha, Rc::from(targets.alpha.as_slice()), None, 1.0 / n);
    let mut parts = vec![color, alpha];
    let depth = (norm.foreground > 0).then(|| {
        let w: Vec<f64> = targets
            .alpha
            .iter()
            .map(|a| f64::from(u8::from(*a > DEPTH_ALPHA_THRESHOLD)))
            .collect();
        let scale = 1.0 / (DEPTH_NORMALIZER * norm.foreground as f64);
        let d = tape.l1(
            depth,
            Rc::from(targets.depth.as_slice()),
            Some(Rc::from(w)),
            scale,
        );
        parts.push(d);
        d
    });
    let total = tape.sum_scalars(&parts);
    LossNodes {
        color,
        alpha,
        depth,
        total,
    }
}

/// Mean absolute difference of `ln(1 + L)` over all texels and channels.
pub fn light_loss(estimate: &EnvironmentMap, truth: &EnvironmentMap) -> f64 {
    let (a, b) = (estimate.as_slice(), truth.as_slice());
    assert_eq!(a.len(), b.len(), "environment sizes");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.max(0.0).ln_1p() - y.max(0.0).ln_1p()).abs())
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub color: f64,
    pub alpha: f64,
    pub depth: f64,
    /// Constant with respect to the network; reported only.
    pub light: f64,
    /// `color + alpha + depth + light`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, tape: &Tape<'_>, nodes: &LossNodes) {
        let v = |x: Var| tape.value(x).data[0];
        self.color += v(nodes.color);
        self.alpha += v(nodes.alpha);
        self.depth += nodes.depth.map_or(0.0, v);
        self.total += v(nodes.total);
    }

    /// Records the light loss and adds it to the total.
    pub fn with_light(mut self, light: f64) -> Self {
        self.light = light;
        self.total += light;
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.color, self.alpha, self.depth, self.light, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nelf::Matrix;

    #[test]
    fn losses_match_hand_computation() {
        let params: [f64; 0] = [];
        let mut tape = Tape::new(&params);
        let out = tape.input(Matrix::from_vec(
            2,
            5,
            vec![0.5, 0.5, 0.5, 1.2, 0.9, /* */ 0.1, 0.0, 0.2, 0.0, 0.1],
        ));
        let mut t = RayTargets::default();
        t.push([0.4, 0.5, 0.8], 1.0, 1.1);
        t.push([0.0, 0.0, 0.0], 0.0, 0.0);
        let nodes = ray_losses(&mut tape, out, &t, LossNorm::of(&t));
        let v = |x: Var| tape.value(x).data[0];
        // Color: (0.1 + 0 + 0.3 + 0.1 + 0 + 0.2) / 6.
        assert!((v(nodes.color) - 0.7 / 6.0).abs() < 1e-15);
        assert!((v(nodes.alpha) - 0.1).abs() < 1e-15);
        // Only the first ray is foreground: |1.2 − 1.1| / 0.2.
        assert!((v(nodes.depth.unwrap()) - 0.5).abs() < 1e-12);
        assert!((v(nodes.total) - (0.7 / 6.0 + 0.1 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn chunked_losses_add_up() {
        let params: [f64; 0] = [];
        let rows: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut t = RayTargets::default();
        for r in 0..4 {
            t.push(
                [0.1 * r as f64, 0.2, 0.3],
                f64::from(r % 2),
                1.0 + 0.1 * r as f64,
            );
        }
        let norm = LossNorm::of(&t);
        let whole = {
            let mut tape = Tape::new(&params);
            let x = tape.input(Matrix::from_vec(4, 5, rows.clone()));
            let n = ray_losses(&mut tape, x, &t, norm);
            tape.value(n.total).data[0]
        };
        let mut sum = 0.0;
        for (a, b) in [(0, 1), (1, 4)] {
            let mut tape = Tape::new(&params);
            let x = tape.input(Matrix::from_vec(b - a, 5, rows[a * 5..b * 5].to_vec()));
            let n = ray_losses(&mut tape, x, &t.range(a, b), norm);
            sum += tape.value(n.total).data[0];
        }
        assert!((whole - sum).abs() < 1e-14);
    }

    #[test]
    fn depth_off_by_the_normalizer_costs_one() {
        let params: [f64; 0] = [];
        let mut tape = Tape::new(&params);
        let out = tape.input(Matrix::from_vec(
            3,
            5,
            vec![
                0.0, 0.0, 0.0, 1.2, 1.0, //
                0.0, 0.0, 0.0, 0.8, 1.0, //
                0.0, 0.0, 0.0, 9.0, 0.0,
            ],
        ));
        let mut t = RayTargets::default();
        t.push([0.0; 3], 1.0, 1.0);
        t.push([0.0; 3], 1.0, 1.0);
        t.push([0.0; 3], 0.0, 0.0);
        let n = ray_losses(&mut tape, out, &t, LossNorm::of(&t));
        assert!((tape.value(n.depth.unwrap()).data[0] - 1.0).abs() < 1e-12);
        assert_eq!(tape.value(n.color).data[0], 0.0);
        assert_eq!(tape.value(n.alpha).data[0], 0.0);
    }

    #[test]
    fn one_texel_off_by_e_minus_one() {
        let truth = EnvironmentMap::zeros(8, 16);
        let mut est = truth.clone();
        let v = std::f64::consts::E - 1.0;
        est.set_texel(3, 5, [v; 3]).unwrap();
        assert!((light_loss(&est, &truth) - 1.0 / 128.0).abs() < 1e-15);
    }

    #[test]
    fn light_loss_survives_quarter_turns() {
        use crate::envmap::{rotate, RotationOp};
        let a = EnvironmentMap::from_fn(8, 16, |d| [1.0 + d.x, 0.5 + d.y * d.y, (3.0 * d.z).exp()]);
        let b = EnvironmentMap::from_fn(8, 16, |d| [0.7, 1.0 - 0.5 * d.y, 0.2 + d.x * d.x]);
        let base = light_loss(&a, &b);
        for q in 1..4 {
            let r = RotationOp::about_y(q as f64 * std::f64::consts::FRAC_PI_2);
            assert!((light_loss(&rotate(&a, &r), &rotate(&b, &r)) - base).abs() < 1e-6);
        }
    }

    #[test]
    fn breakdown_total_is_the_sum_of_parts() {
        let b = LossBreakdown {
            color: 0.1,
            alpha: 0.25,
            depth: 0.5,
            light: 0.0,
            total: 0.85,
        }
        .with_light(0.125);
        assert!((b.total - (b.color + b.alpha + b.depth + b.light)).abs() <= 1e-12);
    }

    #[test]
    fn light_loss_is_zero_on_match_and_symmetric() {
        let a = EnvironmentMap::constant(2, 4, [0.5, 1.0, 2.0]);
        let b = EnvironmentMap::constant(2, 4, [1.0, 1.0, 1.0]);
        assert_eq!(light_loss(&a, &a), 0.0);
        assert!((light_loss(&a, &b) - light_loss(&b, &a)).abs() < 1e-15);
        let expect = ((2f64.ln() - 1.5f64.ln()) + (3f64.ln() - 2f64.ln())) / 3.0;
        assert!((light_loss(&a, &b) - expect).abs() < 1e-15);
    }
}
