//! Parameter initialisation and the layers shared by every network.

use flowpose_tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Per-forward state: where parameters come from, whether they take
/// gradients, and the dropout stream (`None` disables dropout).
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
            dropout: None,
        }
    }

    pub fn train(store: &'a ParamStore, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self {
            store,
            trainable: true,
            dropout: rng,
        }
    }

    pub fn param(&self, g: &mut Graph, name: &str) -> Var {
        g.bind(self.store, name, self.trainable)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }
}

/// He-normal weights `[fan_in, fan_out]` and zero bias.
pub fn init_linear_he(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    store.insert(format!("{name}.w"), Tensor::from_fn(&[fan_in, fan_out], |_| n.sample(rng)));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Uniform `±1/sqrt(fan_in)` weights, optional zero bias.
pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
    let a = 1.0 / (fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).unwrap();
    store.insert(format!("{name}.w"), Tensor::from_fn(&[fan_in, fan_out], |_| u.sample(rng)));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }
}

/// Weights scaled by `gain` after uniform init; useful for small output heads.
pub fn init_linear_scaled(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    init_linear(store, rng, name, fan_in, fan_out, true);
    let w = store.get_mut(&format!("{name}.w")).unwrap();
    *w = w.map(|v| v * gain);
}

pub fn init_zero_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gamma"), Tensor::ones(&[dim]));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
}

/// `x · W (+ b)` with parameters `{name}.w` and, if present, `{name}.b`.
pub fn linear(g: &mut Graph, ctx: &Ctx, name: &str, x: Var) -> Var {
    let w = ctx.param(g, &format!("{name}.w"));
    let bname = format!("{name}.b");
    let b = ctx.has(&bname).then(|| ctx.param(g, &bname));
    g.linear(x, w, b)
}

pub fn layer_norm(g: &mut Graph, ctx: &Ctx, name: &str, x: Var) -> Var {
    let gamma = ctx.param(g, &format!("{name}.gamma"));
    let beta = ctx.param(g, &format!("{name}.beta"));
    g.layer_norm(x, gamma, beta, 1e-5)
}

/// Inverted dropout; identity when the context has no dropout stream.
pub fn dropout(g: &mut Graph, ctx: &mut Ctx, x: Var, rate: f64) -> Var {
    let Some(rng) = ctx.dropout.as_deref_mut() else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, c) = ((i / dim) as f64, i % dim);
        let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
        if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn inverse_softplus_inverts() {
        for y in [0.05, 0.8, 3.0, 20.0] {
            let x = inverse_softplus(y);
            assert!(((1.0 + x.exp()).ln() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_table_matches_closed_form() {
        let pe = sinusoidal_encoding(5, 6);
        assert_eq!(pe.get(&[0, 0]), 0.0);
        assert_eq!(pe.get(&[0, 1]), 1.0);
        assert!((pe.get(&[3, 2]) - (3.0 / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-15);
        assert!((pe.get(&[4, 5]) - (4.0 / 10000f64.powf(4.0 / 6.0)).cos()).abs() < 1e-15);
    }

    #[test]
    fn dropout_is_identity_without_a_stream_and_unbiased_with_one() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[20000]));
        let mut ctx = Ctx::eval(&store);
        assert_eq!(dropout(&mut g, &mut ctx, x, 0.5), x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = Ctx::train(&store, Some(&mut rng));
        let y = dropout(&mut g, &mut ctx, x, 0.25);
        let v = g.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-15));
        assert!((v.sum() / 20000.0 - 1.0).abs() < 0.03);
    }
}
