use super::{BufferId, Float, NnError, NnResult, ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    mean_buf: BufferId,
    var_buf: BufferId,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

/// One forward pass: a tape over a read-only parameter store. Batch-norm
/// statistics are collected and applied afterwards with
/// [`apply_stat_updates`].
pub struct Graph<'s, T: Float> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    updates: Vec<StatUpdate<T>>,
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn updates(&self) -> &[StatUpdate<T>] {
        &self.updates
    }

    pub fn into_parts(self) -> (Tape<T>, Vec<StatUpdate<T>>) {
        (self.tape, self.updates)
    }
}

/// Moves running statistics toward the batch statistics:
/// `running = momentum * running + (1 - momentum) * batch`, with the
/// unbiased batch variance.
pub fn apply_stat_updates<T: Float>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    let mom = T::of(BN_MOMENTUM);
    let rest = T::one() - mom;
    for u in updates {
        let unbias = T::of(u.count as f64 / (u.count - 1) as f64);
        for (r, &b) in store.buffer_mut(u.mean_buf).value.data.iter_mut().zip(&u.mean) {
            *r = mom * *r + rest * b;
        }
        for (r, &b) in store.buffer_mut(u.var_buf).value.data.iter_mut().zip(&u.var) {
            *r = mom * *r + rest * b * unbias;
        }
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let w = store.uniform(format!("{name}.w"), &[input, output], fan_in_bound(input));
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[output]));
        Linear { w, b, input, output }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> NnResult<Var> {
        let w = g.p(self.w);
        let b = self.b.map(|b| g.p(b));
        g.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        ksize: usize,
        input: usize,
        output: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let k = store.uniform(
            format!("{name}.k"),
            &[ksize, ksize, input, output],
            fan_in_bound(ksize * ksize * input),
        );
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[output]));
        Conv2d { k, b, stride, pad }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> NnResult<Var> {
        let k = g.p(self.k);
        let y = g.tape.conv2d(x, k, self.stride, self.pad)?;
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub mean: BufferId,
    pub var: BufferId,
}

impl BatchNorm {
    /// `affine = false` leaves out gamma and beta, for blocks that are
    /// modulated externally.
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, affine: bool) -> Self {
        let gamma = affine.then(|| store.ones(format!("{name}.gamma"), &[channels]));
        let beta = affine.then(|| store.zeros(format!("{name}.beta"), &[channels]));
        let mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let var = store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        BatchNorm { gamma, beta, mean, var }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> NnResult<Var> {
        let gamma = self.gamma.map(|p| g.p(p));
        let beta = self.beta.map(|p| g.p(p));
        let eps = T::of(BN_EPS);
        match g.mode {
            Mode::Train => {
                let count = g.tape.value(x).len() / g.tape.value(x).last_dim().max(1);
                let (y, mean, var) = g.tape.batch_norm_train(x, gamma, beta, eps)?;
                g.updates.push(StatUpdate {
                    mean_buf: self.mean,
                    var_buf: self.var,
                    mean,
                    var,
                    count,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = g.store;
                let mean = &store.buffer(self.mean).value.data;
                let var = &store.buffer(self.var).value.data;
                g.tape.batch_norm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.uniform(format!("{name}.table"), &[vocab, dim], 3f64.sqrt());
        Embedding { table, dim }
    }

    /// `ids` is `[N, T]` row-major; returns `[N, T, dim]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, ids: &[usize], n: usize, steps: usize) -> NnResult<Var> {
        let table = g.p(self.table);
        g.tape.embedding(table, ids, &[n, steps])
    }
}

fn check_lengths(lengths: &[usize], n: usize, width: usize) -> NnResult<usize> {
    if lengths.len() != n {
        return Err(NnError::Shape(format!("{} lengths for batch of {n}", lengths.len())));
    }
    let longest = lengths.iter().copied().max().unwrap_or(0);
    if longest > width {
        return Err(NnError::SequenceTooLong {
            length: longest,
            width,
        });
    }
    Ok(longest)
}

fn step_mask<T: Float>(lengths: &[usize], t: usize) -> Vec<T> {
    lengths.iter().map(|&l| if t < l { T::one() } else { T::zero() }).collect()
}

/// LSTM over `[N, T, E]` inputs. Each sequence stops at its true length,
/// so padding never changes the final state.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize) -> Self {
        let wx = Linear::new(store, &format!("{name}.x"), input, 4 * hidden, true);
        let wh = Linear::new(store, &format!("{name}.h"), hidden, 4 * hidden, false);
        Lstm { wx, wh, hidden }
    }

    /// Final hidden state `[N, hidden]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, lengths: &[usize]) -> NnResult<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NnError::Shape(format!("lstm input {s:?}")));
        }
        let (n, width, hs) = (s[0], s[1], self.hidden);
        let longest = check_lengths(lengths, n, width)?;
        let xp = self.wx.forward(g, x)?;
        let mut h = g.tape.constant(Tensor::zeros(&[n, hs]));
        let mut c = g.tape.constant(Tensor::zeros(&[n, hs]));
        for t in 0..longest {
            let xt = g.tape.select_step(xp, t)?;
            let hp = self.wh.forward(g, h)?;
            let z = g.tape.add(xt, hp)?;
            let zi = g.tape.slice_last(z, 0, hs)?;
            let zf = g.tape.slice_last(z, hs, hs)?;
            let zg = g.tape.slice_last(z, 2 * hs, hs)?;
            let zo = g.tape.slice_last(z, 3 * hs, hs)?;
            let i = g.tape.sigmoid(zi);
            let f = g.tape.sigmoid(zf);
            let cand = g.tape.tanh(zg);
            let o = g.tape.sigmoid(zo);
            let keep = g.tape.mul(f, c)?;
            let write = g.tape.mul(i, cand)?;
            let c_new = g.tape.add(keep, write)?;
            let tc = g.tape.tanh(c_new);
            let h_new = g.tape.mul(o, tc)?;
            let mask = step_mask::<T>(lengths, t);
            c = g.tape.blend(c_new, c, &mask)?;
            h = g.tape.blend(h_new, h, &mask)?;
        }
        Ok(h)
    }
}

/// GRU over `[N, T, E]` inputs with the same length masking as [`Lstm`].
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize) -> Self {
        let wx = Linear::new(store, &format!("{name}.x"), input, 3 * hidden, true);
        let wh = Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden, true);
        Gru { wx, wh, hidden }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, lengths: &[usize]) -> NnResult<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NnError::Shape(format!("gru input {s:?}")));
        }
        let (n, width, hs) = (s[0], s[1], self.hidden);
        let longest = check_lengths(lengths, n, width)?;
        let xp = self.wx.forward(g, x)?;
        let mut h = g.tape.constant(Tensor::zeros(&[n, hs]));
        for t in 0..longest {
            let xt = g.tape.select_step(xp, t)?;
            let hp = self.wh.forward(g, h)?;
            let xr = g.tape.slice_last(xt, 0, hs)?;
            let xz = g.tape.slice_last(xt, hs, hs)?;
            let xn = g.tape.slice_last(xt, 2 * hs, hs)?;
            let hr = g.tape.slice_last(hp, 0, hs)?;
            let hz = g.tape.slice_last(hp, hs, hs)?;
            let hn = g.tape.slice_last(hp, 2 * hs, hs)?;
            let sr = g.tape.add(xr, hr)?;
            let r = g.tape.sigmoid(sr);
            let sz = g.tape.add(xz, hz)?;
            let z = g.tape.sigmoid(sz);
            let gated = g.tape.mul(r, hn)?;
            let sn = g.tape.add(xn, gated)?;
            let cand = g.tape.tanh(sn);
            // h' = cand + z * (h - cand)
            let diff = g.tape.sub(h, cand)?;
            let kept = g.tape.mul(z, diff)?;
            let h_new = g.tape.add(cand, kept)?;
            let mask = step_mask::<T>(lengths, t);
            h = g.tape.blend(h_new, h, &mask)?;
        }
        Ok(h)
    }
}
