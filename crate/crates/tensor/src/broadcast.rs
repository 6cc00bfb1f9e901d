//! Numpy-style broadcasting for elementwise binary operations.

use crate::tensor::{numel_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }

    /// Partial derivatives `(d/da, d/db)` at `(a, b)`.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryKind::Add => (1.0, 1.0),
            BinaryKind::Sub => (1.0, -1.0),
            BinaryKind::Mul => (b, a),
            BinaryKind::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let pad = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output element with the flat offsets of both operands.
fn for_each_index(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel_of(out);
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

enum Layout {
    Same,
    /// `b` repeats with period `b.numel()` over `a` (trailing-axis bias).
    SuffixB,
    General(Vec<usize>, Vec<usize>, Vec<usize>),
}

fn layout(a: &Tensor, b: &Tensor) -> (Vec<usize>, Layout) {
    if a.shape() == b.shape() {
        return (a.shape().to_vec(), Layout::Same);
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    if out == a.shape() && a.shape().ends_with(b.shape()) {
        return (out, Layout::SuffixB);
    }
    let sa = view_strides(a.shape(), &out);
    let sb = view_strides(b.shape(), &out);
    (out.clone(), Layout::General(out, sa, sb))
}

pub(crate) fn forward(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Tensor {
    let (shape, lay) = layout(a, b);
    let (ad, bd) = (a.data(), b.data());
    let data = match lay {
        Layout::Same => ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)).collect(),
        Layout::SuffixB => {
            let p = bd.len();
            ad.iter()
                .enumerate()
                .map(|(i, &x)| kind.apply(x, bd[i % p]))
                .collect()
        }
        Layout::General(out, sa, sb) => {
            let mut v = vec![0.0; numel_of(&out)];
            for_each_index(&out, &sa, &sb, |o, ia, ib| v[o] = kind.apply(ad[ia], bd[ib]));
            v
        }
    };
    Tensor::from_vec(&shape, data)
}

/// Gradients with respect to `a` and `b`, each reduced back to its own
/// shape. Only the requested sides are computed.
pub(crate) fn backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (_, lay) = layout(a, b);
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = want_a.then(|| vec![0.0; ad.len()]);
    let mut gb = want_b.then(|| vec![0.0; bd.len()]);
    let mut visit = |o: usize, ia: usize, ib: usize| {
        let (pa, pb) = kind.partials(ad[ia], bd[ib]);
        if let Some(ga) = ga.as_mut() {
            ga[ia] += gd[o] * pa;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += gd[o] * pb;
        }
    };
    match lay {
        Layout::Same => (0..gd.len()).for_each(|i| visit(i, i, i)),
        Layout::SuffixB => {
            let p = bd.len();
            (0..gd.len()).for_each(|i| visit(i, i, i % p));
        }
        Layout::General(out, sa, sb) => for_each_index(&out, &sa, &sb, visit),
    }
    (
        ga.map(|v| Tensor::from_vec(a.shape(), v)),
        gb.map(|v| Tensor::from_vec(b.shape(), v)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_broadcast_like_numpy() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn general_broadcast_matches_manual_expansion() {
        let a = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(&[4, 1], |i| 10.0 * i as f64);
        let c = forward(BinaryKind::Add, &a, &b);
        assert_eq!(c.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    assert_eq!(c.get(&[i, j, k]), a.get(&[i, 0, k]) + b.get(&[j, 0]));
                }
            }
        }
    }
}
