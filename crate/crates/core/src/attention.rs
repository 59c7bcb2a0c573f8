//! Combined causal + window + gate bias and gated attention for full-sequence
//! (training) forwards.

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};

/// Where key `s` sits relative to query `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Future,
    InWindow,
    OutOfWindow,
}

/// Mask geometry for one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub seq_len: usize,
    pub window: usize,
    /// Query heads per kv head.
    pub groups: usize,
}

impl MaskSpec {
    pub fn new(seq_len: usize, window: usize, groups: usize) -> Result<Self> {
        if window < 1 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if groups < 1 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        Ok(Self { seq_len, window, groups })
    }

    pub fn region(&self, t: usize, s: usize) -> Region {
        if s > t {
            Region::Future
        } else if t - s < self.window {
            Region::InWindow
        } else {
            Region::OutOfWindow
        }
    }
}

/// Builds the additive bias `[B, H_q, T, T]` from a per-kv-head gate bias
/// `[B, H_kv, T]`: `-inf` for future keys, `0` inside the window, the key's
/// gate bias outside it.
pub fn build_bias(tape: &mut Tape, mask: &MaskSpec, gate_bias: Var) -> Result<Var> {
    let s = tape.shape(gate_bias);
    if s.len() != 3 || s[2] != mask.seq_len {
        return Err(shape_err!("gate bias {:?} for sequence length {}", s, mask.seq_len));
    }
    tape.window_bias(gate_bias, mask.window, mask.groups)
}

/// `o_t = Σ_s softmax(<q_t, k_s> / √D + B[t, s]) v_s` on `[B, H, T, D]` inputs.
pub fn gated_attention(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Var) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    if qs.len() != 4 || tape.shape(k) != qs.as_slice() || tape.shape(v) != qs.as_slice() {
        return Err(shape_err!("q/k/v shapes {:?} {:?} {:?}", qs, tape.shape(k), tape.shape(v)));
    }
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (qs[3] as f32).sqrt());
    let probs = tape.softmax_lastdim(scores, bias)?;
    tape.bmm(probs, v, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{soft_gate_bias, z_to_bias};
    use crate::tensor::{Rng, Tensor};

    fn bias_grid(window: usize, z: &[f32]) -> Vec<f32> {
        let mut tape = Tape::new();
        let t = z.len();
        let g = tape.constant(z_to_bias(&Tensor::new(&[1, 1, t], z.to_vec()).unwrap()));
        let mask = MaskSpec::new(t, window, 1).unwrap();
        let b = build_bias(&mut tape, &mask, g).unwrap();
        tape.value(b).data().to_vec()
    }

    #[test]
    fn wide_window_is_pure_causal() {
        let grid = bias_grid(3, &[0.0, 0.0, 0.0]);
        for t in 0..3 {
            for s in 0..3 {
                let v = grid[t * 3 + s];
                if s > t {
                    assert_eq!(v, f32::NEG_INFINITY);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn window_one_with_hard_gates() {
        let grid = bias_grid(1, &[1.0, 0.0, 1.0, 0.0]);
        let ninf = f32::NEG_INFINITY;
        let expected = [
            [0.0, ninf, ninf, ninf],
            [0.0, 0.0, ninf, ninf],
            [0.0, ninf, 0.0, ninf],
            [0.0, ninf, 0.0, 0.0],
        ];
        for t in 0..4 {
            assert_eq!(&grid[t * 4..t * 4 + 4], &expected[t]);
        }
    }

    #[test]
    fn distance_equal_to_window_is_outside() {
        let mask = MaskSpec::new(10, 4, 1).unwrap();
        assert_eq!(mask.region(7, 3), Region::OutOfWindow);
        assert_eq!(mask.region(7, 4), Region::InWindow);
        assert_eq!(mask.region(3, 4), Region::Future);
        assert!(MaskSpec::new(10, 0, 1).is_err());
    }

    #[test]
    fn regions_partition_the_causal_triangle() {
        for w in 1..6 {
            let mask = MaskSpec::new(12, w, 1).unwrap();
            for t in 0..12 {
                let in_window = (0..=t).filter(|&s| mask.region(t, s) == Region::InWindow).count();
                let out = (0..=t).filter(|&s| mask.region(t, s) == Region::OutOfWindow).count();
                assert_eq!(in_window + out, t + 1);
                assert_eq!(in_window, (t + 1).min(w));
            }
        }
    }

    #[test]
    fn closed_gates_window_one_copies_values() {
        let mut rng = Rng::new(4);
        let (t, d) = (5, 4);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[1, 1, t, d], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[1, 1, t, d], 1.0, &mut rng));
        let vt = Tensor::randn(&[1, 1, t, d], 1.0, &mut rng);
        let v = tape.constant(vt.clone());
        let g = tape.constant(z_to_bias(&Tensor::zeros(&[1, 1, t])));
        let b = build_bias(&mut tape, &MaskSpec::new(t, 1, 1).unwrap(), g).unwrap();
        let o = gated_attention(&mut tape, q, k, v, b).unwrap();
        assert_eq!(tape.value(o).data(), vt.data());
    }

    #[test]
    fn open_soft_gates_equal_causal_attention() {
        let mut rng = Rng::new(8);
        let (t, d) = (6, 4);
        let qt = Tensor::randn(&[1, 2, t, d], 1.0, &mut rng);
        let kt = Tensor::randn(&[1, 2, t, d], 1.0, &mut rng);
        let vt = Tensor::randn(&[1, 2, t, d], 1.0, &mut rng);
        let run = |gate_u: Option<f32>, window: usize| {
            let mut tape = Tape::new();
            let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
            let gb = match gate_u {
                Some(u) => {
                    let u = tape.constant(Tensor::full(&[1, 2, t], u));
                    soft_gate_bias(&mut tape, u)
                }
                None => tape.constant(Tensor::zeros(&[1, 2, t])),
            };
            let b = build_bias(&mut tape, &MaskSpec::new(t, window, 1).unwrap(), gb).unwrap();
            let o = gated_attention(&mut tape, q, k, v, b).unwrap();
            tape.value(o).data().to_vec()
        };
        let causal = run(None, t);
        for (a, b) in run(Some(1.0), 2).iter().zip(&causal) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in run(Some(0.3), t).iter().zip(&causal) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
