//! Dense building blocks: affine layers, MLPs, LSTM/GRU cells and additive
//! attention pooling.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: expected length {want}, got {got}")))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register_uniform(&format!("{name}.w"), vec![output, input], input, rng)?;
        let b = store.register_uniform(&format!("{name}.b"), vec![output], input, rng)?;
        Ok(Linear { w, b: Some(b), input, output })
    }

    pub fn without_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register_uniform(&format!("{name}.w"), vec![output, input], input, rng)?;
        Ok(Linear { w, b: None, input, output })
    }

    pub fn forward<'a>(&self, tape: &'a Tape<'a>, x: Var<'a>) -> Result<Var<'a>> {
        check_len("linear input", x.len(), self.input)?;
        let b = self.b.map(|b| tape.param(b));
        Ok(tape.linear(tape.param(self.w), b, x))
    }
}

/// Fully connected stack with `tanh` between layers and a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn forward<'a>(&self, tape: &'a Tape<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(l.w).chain(l.b))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LstmCell {
    gates: Linear,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = Linear::new(store, &format!("{name}.gates"), input + hidden, 4 * hidden, rng)?;
        Ok(LstmCell { gates, input, hidden })
    }

    pub fn zero_state<'a>(&self, tape: &'a Tape<'a>) -> (Var<'a>, Var<'a>) {
        (tape.zeros(self.hidden), tape.zeros(self.hidden))
    }

    /// One step of the standard cell: gate order is input, forget, candidate, output.
    pub fn step<'a>(
        &self,
        tape: &'a Tape<'a>,
        x: Var<'a>,
        state: (Var<'a>, Var<'a>),
    ) -> Result<(Var<'a>, Var<'a>)> {
        check_len("lstm input", x.len(), self.input)?;
        let (h, c) = state;
        check_len("lstm hidden", h.len(), self.hidden)?;
        check_len("lstm cell", c.len(), self.hidden)?;
        let n = self.hidden;
        let z = self.gates.forward(tape, tape.concat(&[x, h]))?;
        let i = z.slice(0, n).sigmoid();
        let f = z.slice(n, n).sigmoid();
        let g = z.slice(2 * n, n).tanh();
        let o = z.slice(3 * n, n).sigmoid();
        let c_next = f * c + i * g;
        let h_next = o * c_next.tanh();
        Ok((h_next, c_next))
    }

    pub fn run<'a>(&self, tape: &'a Tape<'a>, inputs: &[Var<'a>]) -> Result<(Var<'a>, Var<'a>)> {
        let mut state = self.zero_state(tape);
        for &x in inputs {
            state = self.step(tape, x, state)?;
        }
        Ok(state)
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    reset_update: Linear,
    cand_x: Linear,
    cand_h: Linear,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruCell {
            reset_update: Linear::new(store, &format!("{name}.ru"), input + hidden, 2 * hidden, rng)?,
            cand_x: Linear::new(store, &format!("{name}.nx"), input, hidden, rng)?,
            cand_h: Linear::new(store, &format!("{name}.nh"), hidden, hidden, rng)?,
            input,
            hidden,
        })
    }

    /// `h' = (1 - u) * n + u * h` with `n = tanh(W_x x + r * (W_h h))`.
    pub fn step<'a>(&self, tape: &'a Tape<'a>, x: Var<'a>, h: Var<'a>) -> Result<Var<'a>> {
        check_len("gru input", x.len(), self.input)?;
        check_len("gru hidden", h.len(), self.hidden)?;
        let n = self.hidden;
        let ru = self.reset_update.forward(tape, tape.concat(&[x, h]))?;
        let r = ru.slice(0, n).sigmoid();
        let u = ru.slice(n, n).sigmoid();
        let cand = (self.cand_x.forward(tape, x)? + r * self.cand_h.forward(tape, h)?).tanh();
        Ok((1.0 - u) * cand + u * h)
    }
}

/// Additive attention: `score_k = v . tanh(W_q q + W_k k_k)`, softmax over
/// keys, context is the weighted sum of the keys.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    query: Linear,
    key: Linear,
    score: Linear,
    pub key_dim: usize,
}

impl AttentionPool {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionPool {
            query: Linear::new(store, &format!("{name}.q"), query_dim, attn_dim, rng)?,
            key: Linear::without_bias(store, &format!("{name}.k"), key_dim, attn_dim, rng)?,
            score: Linear::without_bias(store, &format!("{name}.v"), attn_dim, 1, rng)?,
            key_dim,
        })
    }

    /// Returns the context and the attention weights. An empty key set yields
    /// a zero context and no weights.
    pub fn pool<'a>(
        &self,
        tape: &'a Tape<'a>,
        query: Var<'a>,
        keys: &[Var<'a>],
    ) -> Result<(Var<'a>, Option<Var<'a>>)> {
        if keys.is_empty() {
            return Ok((tape.zeros(self.key_dim), None));
        }
        let q = self.query.forward(tape, query)?;
        let mut scores = Vec::with_capacity(keys.len());
        for &k in keys {
            check_len("attention key", k.len(), self.key_dim)?;
            let e = (q + self.key.forward(tape, k)?).tanh();
            scores.push(self.score.forward(tape, e)?);
        }
        let weights = tape.concat(&scores).softmax();
        let mut ctx = weights.get(0) * keys[0];
        for (i, &k) in keys.iter().enumerate().skip(1) {
            ctx = ctx + weights.get(i) * k;
        }
        Ok((ctx, Some(weights)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn attention_single_key_returns_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let att = AttentionPool::new(&mut store, "a", 3, 2, 4, &mut rng).unwrap();
        let tape = Tape::with_params(&store);
        let q = tape.constant(vec![0.1, -0.2, 0.3]);
        let k = tape.constant(vec![1.5, -2.0]);
        let (ctx, w) = att.pool(&tape, q, &[k]).unwrap();
        assert_eq!(w.unwrap().to_vec(), vec![1.0]);
        assert_eq!(ctx.to_vec(), vec![1.5, -2.0]);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let att = AttentionPool::new(&mut store, "a", 2, 2, 4, &mut rng).unwrap();
        let tape = Tape::with_params(&store);
        let q = tape.constant(vec![0.4, 0.9]);
        let keys: Vec<_> = [[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0]]
            .iter()
            .map(|k| tape.constant(k.to_vec()))
            .collect();
        let (_, w) = att.pool(&tape, q, &keys).unwrap();
        let w = w.unwrap().to_vec();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn attention_empty_is_zero_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let att = AttentionPool::new(&mut store, "a", 2, 3, 4, &mut rng).unwrap();
        let tape = Tape::with_params(&store);
        let (ctx, w) = att.pool(&tape, tape.zeros(2), &[]).unwrap();
        assert!(w.is_none());
        assert_eq!(ctx.to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn lstm_zero_params_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 2, 2, &mut rng).unwrap();
        store.zero_all();
        let tape = Tape::with_params(&store);
        let x = tape.constant(vec![0.7, -0.3]);
        let h = tape.constant(vec![0.2, 0.1]);
        let c = tape.constant(vec![1.0, -2.0]);
        let (h1, c1) = cell.step(&tape, x, (h, c)).unwrap();
        // All gates sit at sigmoid(0) = 0.5 and the candidate at tanh(0) = 0.
        let c_expect: [f64; 2] = [0.5 * 1.0, 0.5 * -2.0];
        let h_expect = [0.5 * c_expect[0].tanh(), 0.5 * c_expect[1].tanh()];
        for k in 0..2 {
            assert!((c1.at(k) - c_expect[k]).abs() < 1e-15);
            assert!((h1.at(k) - h_expect[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_hand_evaluated_one_dim() {
        // input 1, hidden 1: gate weights [w_x, w_h] per gate, hand-set.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 1, 1, &mut rng).unwrap();
        let w = store.id("l.gates.w").unwrap();
        let b = store.id("l.gates.b").unwrap();
        store
            .value_mut(w)
            .copy_from_slice(&[0.5, -0.25, 1.0, 0.5, -1.0, 2.0, 0.3, 0.3]);
        store.value_mut(b).copy_from_slice(&[0.1, 0.0, -0.2, 0.05]);
        let tape = Tape::with_params(&store);
        let (x, h, c) = (0.8, -0.4, 0.6);
        let (h1, c1) = cell
            .step(&tape, tape.scalar(x), (tape.scalar(h), tape.scalar(c)))
            .unwrap();
        let i = sig(0.5 * x - 0.25 * h + 0.1);
        let f = sig(1.0 * x + 0.5 * h);
        let g = (-1.0 * x + 2.0 * h - 0.2).tanh();
        let o = sig(0.3 * x + 0.3 * h + 0.05);
        let c_ref = f * c + i * g;
        let h_ref = o * c_ref.tanh();
        assert!((c1.val() - c_ref).abs() < 1e-14);
        assert!((h1.val() - h_ref).abs() < 1e-14);
    }

    #[test]
    fn gru_hand_evaluated_one_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 1, 1, &mut rng).unwrap();
        let set = |store: &mut ParamStore, name: &str, v: &[f64]| {
            let id = store.id(name).unwrap();
            store.value_mut(id).copy_from_slice(v);
        };
        set(&mut store, "g.ru.w", &[0.4, -0.6, 0.2, 0.9]);
        set(&mut store, "g.ru.b", &[0.1, -0.1]);
        set(&mut store, "g.nx.w", &[1.5]);
        set(&mut store, "g.nx.b", &[0.0]);
        set(&mut store, "g.nh.w", &[-0.7]);
        set(&mut store, "g.nh.b", &[0.2]);
        let tape = Tape::with_params(&store);
        let (x, h) = (0.3, 0.5);
        let out = cell.step(&tape, tape.scalar(x), tape.scalar(h)).unwrap();
        let r = sig(0.4 * x - 0.6 * h + 0.1);
        let u = sig(0.2 * x + 0.9 * h - 0.1);
        let n = (1.5 * x + r * (-0.7 * h + 0.2)).tanh();
        let expect = (1.0 - u) * n + u * h;
        assert!((out.val() - expect).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 3, 2, &mut rng).unwrap();
        let tape = Tape::with_params(&store);
        let state = cell.zero_state(&tape);
        assert!(matches!(
            cell.step(&tape, tape.zeros(2), state),
            Err(Error::Shape(_))
        ));
    }
}
