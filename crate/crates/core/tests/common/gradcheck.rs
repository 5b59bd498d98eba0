//! Central finite-difference checks for every differentiable operation and
//! for whole models.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spatialvqa::lang::Vocabulary;
use spatialvqa::models::{Model, ModelConfig};
use spatialvqa::nn::{Graph, Gru, Lstm, Mode, NnResult, ParamStore, Tape, Tensor, Var};
use spatialvqa::preset::Preset;
use spatialvqa::seed;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Projects the op output onto a fixed random direction so every output
/// element influences the scalar.
fn scalar_loss<F>(f: &F, inputs: &[Tensor<f64>], dir: &mut Option<Tensor<f64>>, seed: u64) -> (Tape<f64>, Vec<Var>, Var)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> NnResult<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let d = dir
        .get_or_insert_with(|| random(&mut seed::rng(seed), &tape.value(out).shape))
        .clone();
    let d = tape.constant(d);
    let prod = tape.mul(out, d).expect("direction shape");
    let loss = tape.sum_all(prod);
    (tape, vars, loss)
}

/// Normwise relative error between analytic and numeric gradients of every
/// input.
fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> NnResult<Var>,
{
    let mut dir = None;
    let (tape, vars, loss) = scalar_loss(&f, &inputs, &mut dir, 77);
    let grads = tape.backward(loss);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for j in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data[j] += H;
            let mut minus = inputs.clone();
            minus[k].data[j] -= H;
            let (tp, _, lp) = scalar_loss(&f, &plus, &mut dir, 77);
            let (tm, _, lm) = scalar_loss(&f, &minus, &mut dir, 77);
            numeric[j] = (tp.value(lp).data[0] - tm.value(lm).data[0]) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        assert!(rel < TOL, "{name}: input {k} relative error {rel:e}");
    }
}

fn shapes_rng(tag: u64) -> ChaCha8Rng {
    seed::rng(seed::derive(&[0x9a, tag]))
}

pub fn linear() {
    let mut rng = shapes_rng(1);
    for (rows, i, o) in [(1, 1, 1), (3, 4, 2), (2, 5, 7)] {
        let x = random(&mut rng, &[rows, i]);
        let w = random(&mut rng, &[i, o]);
        let b = random(&mut rng, &[o]);
        check("linear", vec![x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])));
    }
    let x = random(&mut rng, &[2, 3, 4]);
    let w = random(&mut rng, &[4, 3]);
    check("linear rank 3", vec![x, w], |t, v| t.linear(v[0], v[1], None));
}

pub fn conv2d() {
    let mut rng = shapes_rng(2);
    for (n, h, w, c, k, f, stride, pad) in [
        (1, 3, 3, 1, 1, 1, 1, 0),
        (2, 5, 4, 2, 3, 3, 1, 1),
        (1, 6, 6, 3, 3, 2, 2, 1),
        (2, 4, 5, 2, 2, 2, 2, 0),
    ] {
        let x = random(&mut rng, &[n, h, w, c]);
        let kern = random(&mut rng, &[k, k, c, f]);
        check("conv2d", vec![x, kern], move |t, v| t.conv2d(v[0], v[1], stride, pad));
    }
}

pub fn elementwise() {
    let mut rng = shapes_rng(3);
    for shape in [vec![1], vec![3, 4], vec![2, 3, 2]] {
        let a = random(&mut rng, &shape);
        let b = random(&mut rng, &shape);
        check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
        check("add_const", vec![a.clone()], |t, v| Ok(t.add_const(v[0], 0.3)));
        check("relu", vec![a.clone()], |t, v| Ok(t.relu(v[0])));
        check("sigmoid", vec![a.clone()], |t, v| Ok(t.sigmoid(v[0])));
        check("tanh", vec![a.clone()], |t, v| Ok(t.tanh(v[0])));
        check("sum_all", vec![a.clone()], |t, v| {
            let s = t.sum_all(v[0]);
            Ok(t.scale(s, 1.0))
        });
        let n = a.len();
        check("reshape", vec![a], move |t, v| t.reshape(v[0], &[n]));
    }
}

pub fn bias_and_softmax() {
    let mut rng = shapes_rng(4);
    for shape in [vec![1, 1], vec![3, 4], vec![2, 3, 5]] {
        let c = *shape.last().unwrap();
        let x = random(&mut rng, &shape);
        let b = random(&mut rng, &[c]);
        check("add_bias", vec![x.clone(), b], |t, v| t.add_bias(v[0], v[1]));
        check("softmax", vec![x], |t, v| Ok(t.softmax(v[0])));
    }
}

pub fn batch_norm() {
    let mut rng = shapes_rng(5);
    for shape in [vec![2, 1], vec![4, 3], vec![2, 3, 3, 2]] {
        let c = *shape.last().unwrap();
        let x = random(&mut rng, &shape);
        let g = random(&mut rng, &[c]);
        let b = random(&mut rng, &[c]);
        check("batch_norm train", vec![x.clone(), g.clone(), b.clone()], |t, v| {
            Ok(t.batch_norm_train(v[0], Some(v[1]), Some(v[2]), 1e-5)?.0)
        });
        check("batch_norm train plain", vec![x.clone()], |t, v| Ok(t.batch_norm_train(v[0], None, None, 1e-5)?.0));
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.2 * i as f64).collect();
        check("batch_norm eval", vec![x, g, b], move |t, v| {
            t.batch_norm_eval(v[0], Some(v[1]), Some(v[2]), &mean, &var, 1e-5)
        });
    }
}

pub fn embedding() {
    let mut rng = shapes_rng(6);
    for (vocab, dim, ids, prefix) in [
        (1, 1, vec![0], vec![1]),
        (5, 3, vec![1, 4, 1, 0], vec![2, 2]),
        (7, 2, vec![6, 6, 6, 2, 3, 0], vec![3, 2]),
    ] {
        let table = random(&mut rng, &[vocab, dim]);
        check("embedding", vec![table], move |t, v| t.embedding(v[0], &ids, &prefix));
    }
}

pub fn concat_slice_select() {
    let mut rng = shapes_rng(7);
    for (rows, a, b) in [(1, 1, 1), (3, 2, 4), (2, 5, 3)] {
        let x = random(&mut rng, &[rows, a]);
        let y = random(&mut rng, &[rows, b]);
        check("concat", vec![x.clone(), y.clone()], |t, v| t.concat(&[v[0], v[1], v[0]]));
        check("slice", vec![y], move |t, v| t.slice_last(v[0], b / 2, b - b / 2));
    }
    for (n, steps, g, at) in [(1, 1, 1, 0), (2, 3, 4, 1), (3, 4, 2, 3)] {
        let x = random(&mut rng, &[n, steps, g]);
        check("select_step", vec![x], move |t, v| t.select_step(v[0], at));
    }
}

pub fn pooling_and_tiling() {
    let mut rng = shapes_rng(8);
    for shape in [vec![1, 1, 1], vec![2, 3, 4], vec![2, 2, 3, 3]] {
        let x = random(&mut rng, &shape);
        check("mean_pool", vec![x.clone()], |t, v| t.mean_pool(v[0]));
        check("sum_pool", vec![x], |t, v| t.sum_pool(v[0]));
    }
    for (n, s, p) in [(1, 1, 1), (2, 3, 4), (3, 2, 5)] {
        let x = random(&mut rng, &[n, s]);
        check("tile", vec![x], move |t, v| t.tile(v[0], p));
    }
}

pub fn film_and_blend() {
    let mut rng = shapes_rng(9);
    for (n, h, w, c) in [(1, 1, 1, 1), (2, 2, 3, 3), (3, 2, 2, 4)] {
        let x = random(&mut rng, &[n, h, w, c]);
        let g = random(&mut rng, &[n, c]);
        let b = random(&mut rng, &[n, c]);
        check("film", vec![x, g, b], |t, v| t.film(v[0], v[1], v[2]));
    }
    for (n, g, mask) in [(1, 1, vec![1.0]), (3, 2, vec![1.0, 0.0, 1.0]), (2, 5, vec![0.0, 1.0])] {
        let a = random(&mut rng, &[n, g]);
        let b = random(&mut rng, &[n, g]);
        check("blend", vec![a, b], move |t, v| t.blend(v[0], v[1], &mask));
    }
}

pub fn attention_and_pairs() {
    let mut rng = shapes_rng(10);
    for (n, p, d) in [(1, 1, 1), (2, 4, 3), (3, 3, 2)] {
        let w = random(&mut rng, &[n, p]);
        let vals = random(&mut rng, &[n, p, d]);
        check("attend", vec![w, vals], |t, v| t.attend(v[0], v[1]));
    }
    for (n, h, w, d, s) in [(1, 1, 1, 1, 1), (2, 2, 2, 2, 3), (1, 2, 3, 3, 2)] {
        let x = random(&mut rng, &[n, h, w, d]);
        let q = random(&mut rng, &[n, s]);
        check("pair_concat", vec![x, q], |t, v| t.pair_concat(v[0], v[1]));
    }
}

pub fn cross_entropy() {
    let mut rng = shapes_rng(11);
    for (n, k, labels) in [(1, 2, vec![1]), (3, 2, vec![0, 1, 1]), (4, 5, vec![4, 0, 2, 2])] {
        let x = random(&mut rng, &[n, k]);
        check("cross_entropy", vec![x], move |t, v| t.cross_entropy(v[0], &labels));
    }
}

pub fn reuse_accumulates() {
    let mut rng = shapes_rng(12);
    for shape in [vec![1], vec![2, 3], vec![4]] {
        let x = random(&mut rng, &shape);
        check("reuse", vec![x.clone()], |t, v| {
            let s = t.sigmoid(v[0]);
            let p = t.mul(s, v[0])?;
            t.add(p, v[0])
        });
        let mut tape = Tape::<f64>::new();
        let v = tape.input(x.clone());
        let twice = tape.add(v, v).unwrap();
        let loss = tape.sum_all(twice);
        let g = tape.backward(loss);
        assert!(g.of(v).unwrap().iter().all(|&d| d == 2.0));
    }
}

enum Rnn {
    Lstm(Lstm),
    Gru(Gru),
}

fn rnn_loss(rnn: &Rnn, store: &ParamStore<f64>, x: &Tensor<f64>, lengths: &[usize], dir: &Tensor<f64>) -> (Tape<f64>, Var, Var) {
    let mut g = Graph::new(store, Mode::Train);
    let xv = g.tape.input(x.clone());
    let h = match rnn {
        Rnn::Lstm(l) => l.forward(&mut g, xv, lengths),
        Rnn::Gru(l) => l.forward(&mut g, xv, lengths),
    }
    .expect("forward");
    let d = g.tape.constant(dir.clone());
    let prod = g.tape.mul(h, d).unwrap();
    let loss = g.tape.sum_all(prod);
    (g.tape, xv, loss)
}

/// Checks a recurrent layer with respect to its input and every weight.
fn check_recurrent(name: &str, lstm: bool, n: usize, steps: usize, e: usize, hidden: usize, lengths: Vec<usize>) {
    let mut store = ParamStore::<f64>::new(seed::derive(&[n as u64, steps as u64, e as u64]));
    let rnn = if lstm {
        Rnn::Lstm(Lstm::new(&mut store, "rnn", e, hidden))
    } else {
        Rnn::Gru(Gru::new(&mut store, "rnn", e, hidden))
    };
    // Nonzero biases so their gradients are exercised away from zero.
    for p in store.params_mut() {
        for (i, v) in p.value.data.iter_mut().enumerate() {
            *v += 0.1 * ((i as f64) * 0.7).sin();
        }
    }
    let mut rng = shapes_rng(13 + n as u64);
    let x = random(&mut rng, &[n, steps, e]);
    let dir = random(&mut rng, &[n, hidden]);
    let (tape, xv, loss) = rnn_loss(&rnn, &store, &x, &lengths, &dir);
    let grads = tape.backward(loss);
    let eval = |s: &ParamStore<f64>, x: &Tensor<f64>| {
        let (t, _, l) = rnn_loss(&rnn, s, x, &lengths, &dir);
        t.value(l).data[0]
    };
    let compare = |what: &str, analytic: Vec<f64>, numeric: Vec<f64>| {
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < TOL, "{name}: {what} relative error {:e}", diff / scale);
    };
    let analytic = grads.of(xv).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.len()]);
    let numeric = (0..x.len())
        .map(|j| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[j] += H;
            m.data[j] -= H;
            (eval(&store, &p) - eval(&store, &m)) / (2.0 * H)
        })
        .collect();
    compare("input", analytic, numeric);
    for &(id, var) in tape.param_vars() {
        let analytic = grads.of(var).map(|g| g.to_vec()).unwrap_or(vec![0.0; store.param(id).value.len()]);
        let numeric = (0..analytic.len())
            .map(|j| {
                let (mut p, mut m) = (store.clone(), store.clone());
                p.param_mut(id).value.data[j] += H;
                m.param_mut(id).value.data[j] -= H;
                (eval(&p, &x) - eval(&m, &x)) / (2.0 * H)
            })
            .collect();
        compare(&store.param(id).name.clone(), analytic, numeric);
    }
}

pub fn lstm_steps() {
    check_recurrent("lstm single step", true, 2, 1, 3, 2, vec![1, 1]);
    check_recurrent("lstm masked", true, 3, 3, 2, 3, vec![3, 1, 2]);
    check_recurrent("lstm", true, 1, 4, 2, 2, vec![4]);
}

pub fn gru_steps() {
    check_recurrent("gru single step", false, 2, 1, 3, 2, vec![1, 1]);
    check_recurrent("gru masked", false, 3, 3, 2, 3, vec![3, 0, 2]);
    check_recurrent("gru", false, 1, 4, 2, 2, vec![4]);
}

pub const OP_CASES: [(&str, fn()); 14] = [
    ("linear", linear),
    ("conv2d", conv2d),
    ("elementwise", elementwise),
    ("bias and softmax", bias_and_softmax),
    ("batch norm", batch_norm),
    ("embedding", embedding),
    ("concat, slice, select", concat_slice_select),
    ("pooling and tiling", pooling_and_tiling),
    ("film and blend", film_and_blend),
    ("attention and pairs", attention_and_pairs),
    ("cross entropy", cross_entropy),
    ("reuse", reuse_accumulates),
    ("lstm", lstm_steps),
    ("gru", gru_steps),
];

pub const END_TO_END_MODELS: [&str; 5] = ["film", "cnnlstm+coords", "relnet", "san", "mc+FiLM+convs"];

fn vocab() -> usize {
    Vocabulary::standard().len()
}

/// Gradient of the float32 model against a float64 central-difference
/// reference on the same weights.
pub fn end_to_end(name: &str) {
    let m: Model<f32> = Model::build(ModelConfig::from_name(name, Preset::Desk).unwrap(), vocab(), 11).unwrap();
    let batch = super::fake_batch(4, 32, 13);
    let mut g = Graph::new(&m.store, Mode::Train);
    let out = m.forward(&mut g, &batch).unwrap();
    let loss = g.tape.cross_entropy(out.logits, &batch.labels).unwrap();
    let grads = g.tape.backward(loss);
    let mut reference = m.store.cast::<f64>();
    let m64: Model<f64> = {
        let mut built = Model::build(m.config, vocab(), 11).unwrap();
        built.store = reference.clone();
        built
    };
    let loss64 = |store: &ParamStore<f64>| {
        let mut mm = m64.clone();
        mm.store = store.clone();
        let mut g = Graph::new(&mm.store, Mode::Train);
        let out = mm.forward(&mut g, &batch).unwrap();
        let l = g.tape.cross_entropy(out.logits, &batch.labels).unwrap();
        g.tape.value(l).data[0]
    };
    let mut rng = seed::rng(14);
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for &(id, var) in g.tape.param_vars() {
        let analytic = grads.of(var).unwrap();
        for _ in 0..3 {
            let j = rng.gen_range(0..analytic.len());
            let orig = reference.param(id).value.data[j];
            reference.param_mut(id).value.data[j] = orig + 1e-5;
            let up = loss64(&reference);
            reference.param_mut(id).value.data[j] = orig - 1e-5;
            let down = loss64(&reference);
            reference.param_mut(id).value.data[j] = orig;
            let numeric = (up - down) / 2e-5;
            diff += (analytic[j] as f64 - numeric).powi(2);
            scale += numeric.powi(2);
        }
    }
    let rel = diff.sqrt() / scale.sqrt().max(1e-12);
    assert!(rel < 1e-3, "{name}: relative error {rel:e}");
}
