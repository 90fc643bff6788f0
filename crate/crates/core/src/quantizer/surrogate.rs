//! Surrogate gradients for the sign comparator.
//!
//! Forward values are the hard ternary levels. Backward treats each
//! *critical* observed entry as `tanh(z - b)`: the entries on either side of
//! the single sign change in the observed sequence, where virtual `+1`
//! below and `-1` above the observed range make the edges well defined.
//! Every other entry, including the zero-interpolated ones, is a constant.

use super::{alpha, levels_per_feature, quantize_levels, BitAllocation, TernaryLevelVector};
use crate::diffcore::{CustomOp, DiffError, Graph, Tensor, Var};

/// Zero-based indices of the observed entries adjacent to the sign change.
pub fn critical_entries(levels: &TernaryLevelVector, bits: u32, b_max: u32) -> Vec<usize> {
    let a = alpha(bits, b_max);
    let observed = (1usize << bits) - 1;
    let m = (1..=observed).take_while(|j| levels.0[j * a - 1] == 1).count();
    let mut out = Vec::with_capacity(2);
    if m >= 1 {
        out.push(m * a - 1);
    }
    if m < observed {
        out.push((m + 1) * a - 1);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateGrads {
    pub dz: f64,
    pub dboundaries: Vec<f64>,
}

/// Backward rule for one feature given upstream gradients on each of its
/// `K` level entries.
pub fn surrogate_backward(z: f64, boundaries: &[f64], bits: u32, b_max: u32, upstream: &[f64]) -> SurrogateGrads {
    let levels = quantize_levels(z, boundaries, bits, b_max);
    let mut dboundaries = vec![0.0; boundaries.len()];
    let mut dz = 0.0;
    for k in critical_entries(&levels, bits, b_max) {
        let t = (z - boundaries[k]).tanh();
        let slope = upstream[k] * (1.0 - t * t);
        dz += slope;
        dboundaries[k] -= slope;
    }
    SurrogateGrads { dz, dboundaries }
}

struct Materialize {
    k: usize,
}

impl CustomOp for Materialize {
    fn name(&self) -> &'static str {
        "materialize_boundaries"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let k = self.k;
        let pseudo = inputs[1].data();
        let g = upstream.data();
        let n = inputs[0].len();
        let mut dfirst = vec![0.0; n];
        let mut dpseudo = vec![0.0; n * (k - 1)];
        for i in 0..n {
            let row = &g[i * k..(i + 1) * k];
            dfirst[i] = row.iter().sum();
            // interval c feeds boundaries c+1..k (zero-based)
            let mut tail = 0.0;
            for c in (0..k - 1).rev() {
                tail += row[c + 1];
                if pseudo[i * (k - 1) + c] > 0.0 {
                    dpseudo[i * (k - 1) + c] = tail;
                }
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), dfirst).expect("shape")),
            Some(Tensor::new(inputs[1].shape().to_vec(), dpseudo).expect("shape")),
        ]
    }
}

/// Boundaries `[N, K]` as a differentiable function of the first boundary
/// `[N]` and the pseudo-intervals `[N, K - 1]`.
pub fn materialize_op(g: &mut Graph, first: Var, pseudo: Var) -> Result<Var, DiffError> {
    let n = g.value(first).len();
    let k = g.value(pseudo).last_dim() + 1;
    if g.value(pseudo).len() != n * (k - 1) {
        return Err(DiffError::Shape {
            op: "materialize_boundaries",
            detail: format!("{:?} vs {:?}", g.shape(first), g.shape(pseudo)),
        });
    }
    let (fd, pd) = (g.value(first).data(), g.value(pseudo).data());
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut acc = fd[i];
        out.push(acc);
        for &beta in &pd[i * (k - 1)..(i + 1) * (k - 1)] {
            acc += beta.max(0.0);
            out.push(acc);
        }
    }
    let value = Tensor::new(vec![n, k], out)?;
    Ok(g.custom(&[first, pseudo], value, Box::new(Materialize { k })))
}

struct Quantize {
    bits: Vec<u32>,
    b_max: u32,
}

impl CustomOp for Quantize {
    fn name(&self) -> &'static str {
        "quantize_levels"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let (z, bnd) = (inputs[0].data(), inputs[1].data());
        let n = self.bits.len();
        let k = levels_per_feature(self.b_max);
        let batch = z.len() / n;
        let (lv, up) = (output.data(), upstream.data());
        let mut dz = vec![0.0; z.len()];
        let mut db = vec![0.0; bnd.len()];
        for b in 0..batch {
            for i in 0..n {
                let at = (b * n + i) * k;
                let levels = TernaryLevelVector(lv[at..at + k].iter().map(|&v| v as i8).collect());
                for c in critical_entries(&levels, self.bits[i], self.b_max) {
                    let t = (z[b * n + i] - bnd[i * k + c]).tanh();
                    let slope = up[at + c] * (1.0 - t * t);
                    dz[b * n + i] += slope;
                    db[i * k + c] -= slope;
                }
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), dz).expect("shape")),
            Some(Tensor::new(inputs[1].shape().to_vec(), db).expect("shape")),
        ]
    }
}

/// Ternary levels `[B, N, K]` for features `z` `[B, N]` against boundaries
/// `[N, K]` at the rates in `allocation`, with surrogate gradients.
pub fn quantize_op(g: &mut Graph, z: Var, boundaries: Var, allocation: &BitAllocation) -> Result<Var, DiffError> {
    let n = allocation.features();
    let k = levels_per_feature(allocation.b_max);
    let zs = g.shape(z).to_vec();
    if zs.len() != 2 || zs[1] != n || g.shape(boundaries) != [n, k] {
        return Err(DiffError::Shape {
            op: "quantize_levels",
            detail: format!("z {zs:?}, boundaries {:?}, {n} features x {k}", g.shape(boundaries)),
        });
    }
    let (zd, bd) = (g.value(z).data(), g.value(boundaries).data());
    let mut out = Vec::with_capacity(zd.len() * k);
    for (idx, &zi) in zd.iter().enumerate() {
        let i = idx % n;
        let levels = quantize_levels(zi, &bd[i * k..(i + 1) * k], allocation.bits[i], allocation.b_max);
        out.extend(levels.0.iter().map(|&v| v as f64));
    }
    let value = Tensor::new(vec![zs[0], n, k], out)?;
    Ok(g.custom(
        &[z, boundaries],
        value,
        Box::new(Quantize {
            bits: allocation.bits.clone(),
            b_max: allocation.b_max,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::allocate_bits;

    const GRID: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];

    #[test]
    fn critical_entries_with_sentinels() {
        let l = quantize_levels(-1.5, &GRID, 3, 3);
        assert_eq!(critical_entries(&l, 3, 3), vec![1, 2]);
        let l = quantize_levels(-1.5, &GRID, 2, 3);
        assert_eq!(critical_entries(&l, 2, 3), vec![1, 3]);
        let l = quantize_levels(-1.5, &GRID, 1, 3);
        assert_eq!(critical_entries(&l, 1, 3), vec![3]);
        // above every boundary: only the last observed entry
        let l = quantize_levels(9.0, &GRID, 3, 3);
        assert_eq!(critical_entries(&l, 3, 3), vec![6]);
        let l = quantize_levels(-9.0, &GRID, 2, 3);
        assert_eq!(critical_entries(&l, 2, 3), vec![1]);
    }

    #[test]
    fn boundary_gradient_matches_closed_form() {
        // z between b^(2) and b^(3) (1-based); upstream a on entry j = 3
        let z = -1.5;
        let a = 0.7;
        let mut up = vec![0.0; 7];
        up[2] = a;
        let g = surrogate_backward(z, &GRID, 3, 3, &up);
        let expected = -a * (1.0 - (z - GRID[2]).tanh().powi(2));
        assert!((g.dboundaries[2] - expected).abs() < 1e-15);
        assert!(g.dboundaries.iter().enumerate().all(|(k, &v)| k == 2 || v == 0.0));
    }

    #[test]
    fn masked_entries_get_exact_zero() {
        let up = [1.0; 7];
        let g = surrogate_backward(0.3, &GRID, 3, 3, &up);
        for (k, v) in g.dboundaries.iter().enumerate() {
            if k != 3 && k != 4 {
                assert_eq!(*v, 0.0);
            }
        }
        // zero-interpolated entries at reduced rate carry nothing
        let g = surrogate_backward(0.3, &GRID, 2, 3, &up);
        assert_eq!(g.dboundaries[4], 0.0);
        assert!(g.dboundaries[3] != 0.0 && g.dboundaries[5] != 0.0);
    }

    #[test]
    fn saturates_far_from_boundaries() {
        let up = [1.0; 7];
        let g = surrogate_backward(13.0, &GRID, 3, 3, &up);
        assert!(g.dz.abs() <= 1e-8);
        assert!(g.dboundaries.iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn tanh_branch_finite_difference() {
        // d/db tanh(z - b) at z - b = 0.2
        let (z, b) = (0.2, 0.0);
        let mut bnd = GRID;
        bnd[3] = b;
        let mut up = [0.0; 7];
        up[3] = 1.0;
        let g = surrogate_backward(z, &bnd, 3, 3, &up);
        let h = 1e-5;
        let numeric = ((z - (b + h)).tanh() - (z - (b - h)).tanh()) / (2.0 * h);
        assert!((g.dboundaries[3] - numeric).abs() / numeric.abs() <= 1e-4);
        let numeric_z = ((z + h - b).tanh() - (z - h - b).tanh()) / (2.0 * h);
        assert!((g.dz - numeric_z).abs() / numeric_z.abs() <= 1e-4);
    }

    #[test]
    fn graph_ops_agree_with_scalar_rule() {
        let alloc = allocate_bits(5, 2, 3).unwrap();
        let mut g = Graph::new();
        let first = g.leaf(Tensor::vector(vec![-3.0, -1.0]), true);
        let pseudo = g.leaf(
            Tensor::new(
                vec![2, 6],
                vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, -0.2, 0.5, 0.5, 0.5, 0.5],
            )
            .unwrap(),
            true,
        );
        let bnd = materialize_op(&mut g, first, pseudo).unwrap();
        let z = g.leaf(Tensor::new(vec![1, 2], vec![-1.4, 0.1]).unwrap(), true);
        let lv = quantize_op(&mut g, z, bnd, &alloc).unwrap();
        let sums = g.sum_last(lv);
        let loss = g.sum(sums);
        let grads = g.backward(loss).unwrap();
        let rows = g.value(bnd).data().to_vec();
        let mut expected_dz = Vec::new();
        for i in 0..2 {
            let r = surrogate_backward([-1.4, 0.1][i], &rows[i * 7..(i + 1) * 7], alloc.bits[i], 3, &[1.0; 7]);
            expected_dz.push(r.dz);
        }
        assert_eq!(grads.get(z).unwrap().data(), expected_dz.as_slice());
        // the collapsed interval (-0.2) receives no gradient
        assert_eq!(grads.get(pseudo).unwrap().data()[7], 0.0);
    }
}
