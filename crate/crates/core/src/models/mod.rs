//! The shared image, language and answer modules with five swappable cores.

mod config;

pub use config::{
    ConfigError, Core, CoreLayers, Dims, Fusion, Modality, ModelConfig, Recurrent, ACCEPTANCE_VARIANTS,
    DEFAULT_FILM_LAYERS,
};

use crate::dataset::Batch;
use crate::nn::{BatchNorm, Conv2d, Embedding, Float, Graph, Gru, Linear, Lstm, NnError, NnResult, ParamStore, Tensor, Var};
use crate::scene::coordinate_map;

/// `[conv 3×3 stride 2 → batch norm → relu] × 3`.
#[derive(Clone, Debug)]
pub struct ImageModule {
    convs: Vec<(Conv2d, BatchNorm)>,
}

impl ImageModule {
    fn new<T: Float>(store: &mut ParamStore<T>, channels: usize) -> Self {
        let convs = (0..3)
            .map(|i| {
                let input = if i == 0 { 3 } else { channels };
                (
                    Conv2d::new(store, &format!("image.conv{i}"), 3, input, channels, 2, 1, false),
                    BatchNorm::new(store, &format!("image.bn{i}"), channels, true),
                )
            })
            .collect();
        ImageModule { convs }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, images: Var) -> NnResult<Var> {
        let mut x = images;
        for (conv, bn) in &self.convs {
            let c = conv.forward(g, x)?;
            let b = bn.forward(g, c)?;
            x = g.tape.relu(b);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
enum Rnn {
    Lstm(Lstm),
    Gru(Gru),
}

/// Word embeddings followed by an LSTM or GRU; the final hidden state is
/// the sentence embedding.
#[derive(Clone, Debug)]
pub struct LanguageModule {
    embedding: Embedding,
    rnn: Rnn,
}

impl LanguageModule {
    fn new<T: Float>(store: &mut ParamStore<T>, kind: Recurrent, vocab: usize, emb: usize, size: usize) -> Self {
        let embedding = Embedding::new(store, "language.embedding", vocab, emb);
        let rnn = match kind {
            Recurrent::Lstm => Rnn::Lstm(Lstm::new(store, "language.lstm", emb, size)),
            Recurrent::Gru => Rnn::Gru(Gru::new(store, "language.gru", emb, size)),
        };
        LanguageModule { embedding, rnn }
    }

    pub fn kind(&self) -> Recurrent {
        match self.rnn {
            Rnn::Lstm(_) => Recurrent::Lstm,
            Rnn::Gru(_) => Recurrent::Gru,
        }
    }

    pub fn size(&self) -> usize {
        match &self.rnn {
            Rnn::Lstm(l) => l.hidden,
            Rnn::Gru(l) => l.hidden,
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &[u8],
        n: usize,
        width: usize,
        lengths: &[usize],
    ) -> NnResult<Var> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = self.embedding.forward(g, &ids, n, width)?;
        match &self.rnn {
            Rnn::Lstm(l) => l.forward(g, x, lengths),
            Rnn::Gru(l) => l.forward(g, x, lengths),
        }
    }
}

/// Concatenates the coordinate map to `[N, H, W, C]` features.
pub fn append_coords<T: Float>(g: &mut Graph<'_, T>, features: Var) -> NnResult<Var> {
    let s = g.tape.shape(features).to_vec();
    if s.len() != 4 {
        return Err(NnError::Shape(format!("append_coords: {s:?}")));
    }
    let map = coordinate_map(s[1], s[2]);
    let mut data = Vec::with_capacity(s[0] * map.len());
    for _ in 0..s[0] {
        data.extend(map.iter().map(|&v| T::of(v as f64)));
    }
    let coords = g.tape.constant(Tensor::new(vec![s[0], s[1], s[2], 2], data));
    g.tape.concat(&[features, coords])
}

/// A per-position layer: 3×3 convolution or a position-wise linear map.
#[derive(Clone, Debug)]
enum Spatial {
    Conv(Conv2d),
    Fc(Linear),
}

impl Spatial {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, layers: CoreLayers, input: usize, output: usize, bias: bool) -> Self {
        match layers {
            CoreLayers::Convolutional => Spatial::Conv(Conv2d::new(store, name, 3, input, output, 1, 1, bias)),
            CoreLayers::FullyConnected => Spatial::Fc(Linear::new(store, name, input, output, bias)),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> NnResult<Var> {
        match self {
            Spatial::Conv(c) => c.forward(g, x),
            Spatial::Fc(l) => l.forward(g, x),
        }
    }
}

/// Computes per-channel `(1 + Δγ, β)` from the sentence embedding.
#[derive(Clone, Debug)]
struct FilmGenerator {
    linear: Linear,
    channels: usize,
}

impl FilmGenerator {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, sentence: usize, channels: usize, blocks: usize) -> Self {
        FilmGenerator {
            linear: Linear::new(store, name, sentence, 2 * channels * blocks, true),
            channels,
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, q: Var) -> NnResult<Var> {
        self.linear.forward(g, q)
    }

    fn block<T: Float>(&self, g: &mut Graph<'_, T>, coeffs: Var, k: usize) -> NnResult<(Var, Var)> {
        let c = self.channels;
        let dg = g.tape.slice_last(coeffs, 2 * c * k, c)?;
        let gamma = g.tape.add_const(dg, T::one());
        let beta = g.tape.slice_last(coeffs, 2 * c * k + c, c)?;
        Ok((gamma, beta))
    }
}

/// Per-position fusion with the sentence followed by shared layers, then
/// spatial mean pooling. Used by MC and by early-fusion CNN-LSTM.
#[derive(Clone, Debug)]
struct FusedStack {
    film: Option<FilmGenerator>,
    layers: Vec<(Spatial, BatchNorm)>,
}

impl FusedStack {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        fusion: Fusion,
        kind: CoreLayers,
        features: usize,
        sentence: usize,
        width: usize,
        depth: usize,
    ) -> Self {
        let (film, first_in) = match fusion {
            Fusion::Film => (Some(FilmGenerator::new(store, &format!("{name}.film"), sentence, features, 1)), features),
            Fusion::Concat => (None, features + sentence),
        };
        let layers = (0..depth)
            .map(|i| {
                let input = if i == 0 { first_in } else { width };
                (
                    Spatial::new(store, &format!("{name}.layer{i}"), kind, input, width, false),
                    BatchNorm::new(store, &format!("{name}.bn{i}"), width, true),
                )
            })
            .collect();
        FusedStack { film, layers }
    }

    fn fuse<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, q: Var) -> NnResult<Var> {
        match &self.film {
            Some(gen) => {
                let coeffs = gen.forward(g, q)?;
                let (gamma, beta) = gen.block(g, coeffs, 0)?;
                g.tape.film(x, gamma, beta)
            }
            None => {
                let s = g.tape.shape(x).to_vec();
                let positions = s[1] * s[2];
                let tiled = g.tape.tile(q, positions)?;
                let qs = g.tape.shape(q)[1];
                let tiled = g.tape.reshape(tiled, &[s[0], s[1], s[2], qs])?;
                g.tape.concat(&[x, tiled])
            }
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, q: Var) -> NnResult<Var> {
        let mut h = self.fuse(g, x, q)?;
        for (layer, bn) in &self.layers {
            let y = layer.forward(g, h)?;
            let y = bn.forward(g, y)?;
            h = g.tape.relu(y);
        }
        g.tape.mean_pool(h)
    }
}

#[derive(Clone, Debug)]
struct CnnLstmCore {
    position: Linear,
    hidden: Linear,
}

#[derive(Clone, Debug)]
struct SanCore {
    query: Linear,
    values: Linear,
    rounds: Vec<(Linear, Linear, Linear)>,
}

#[derive(Clone, Debug)]
struct RelNetCore {
    projection: Linear,
    g: Vec<Linear>,
    f: Linear,
}

#[derive(Clone, Debug)]
struct FilmCore {
    stem: Conv2d,
    generator: FilmGenerator,
    blocks: Vec<(Spatial, BatchNorm)>,
    out: Linear,
}

#[derive(Clone, Debug)]
enum CoreModule {
    CnnLstm(CnnLstmCore),
    Fused(FusedStack),
    San(SanCore),
    RelNet(RelNetCore),
    Film(FilmCore),
}

#[derive(Clone, Debug)]
struct Classifier {
    hidden: Linear,
    bn: BatchNorm,
    out: Linear,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub pre_answer: Var,
    pub features: Option<Var>,
    pub sentence: Option<Var>,
    /// SAN attention weights `[N, H·W]`, one per round.
    pub attention: Vec<Var>,
    /// RelNet pair inputs `[N, (H·W)², 2·32 + S]`.
    pub pairs: Option<Var>,
}

/// Outputs of the core module alone.
#[derive(Clone, Debug)]
pub struct CoreOutput {
    pub pre_answer: Var,
    pub attention: Vec<Var>,
    pub pairs: Option<Var>,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A built model: configuration, layer handles and the parameter store.
#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    image: Option<ImageModule>,
    language: Option<LanguageModule>,
    core: CoreModule,
    classifier: Classifier,
    pre_answer_size: usize,
}

impl<T: Float> Model<T> {
    pub fn build(config: ModelConfig, vocab_size: usize, init_seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let d = config.dims();
        let mut store = ParamStore::new(init_seed);
        let s = config.sentence_size();
        let c = d.image_channels;
        let feat = c + if config.coords { 2 } else { 0 };
        let image = (config.zero_modality != Some(Modality::Image)).then(|| ImageModule::new(&mut store, c));
        let language = (config.zero_modality != Some(Modality::Language))
            .then(|| LanguageModule::new(&mut store, config.recurrent(), vocab_size, d.embedding, s));
        let st = &mut store;
        let (core, pre_answer_size) = match config.core {
            Core::CnnLstm if config.early_fusion => (
                CoreModule::Fused(FusedStack::new(st, "cnnlstm", config.fusion, config.core_layers, feat, s, c, 1)),
                c,
            ),
            Core::CnnLstm => (
                CoreModule::CnnLstm(CnnLstmCore {
                    position: Linear::new(st, "cnnlstm.position", feat, c, true),
                    hidden: Linear::new(st, "cnnlstm.hidden", c + s, c, true),
                }),
                c,
            ),
            Core::Mc => (
                CoreModule::Fused(FusedStack::new(st, "mc", config.fusion, config.core_layers, feat, s, c, 2)),
                c,
            ),
            Core::San => {
                let k = d.san;
                let rounds = (0..d.san_rounds)
                    .map(|r| {
                        (
                            Linear::new(st, &format!("san.round{r}.image"), k, k, false),
                            Linear::new(st, &format!("san.round{r}.query"), k, k, true),
                            Linear::new(st, &format!("san.round{r}.logit"), k, 1, true),
                        )
                    })
                    .collect();
                (
                    CoreModule::San(SanCore {
                        query: Linear::new(st, "san.query", s, k, true),
                        values: Linear::new(st, "san.values", feat, k, true),
                        rounds,
                    }),
                    k,
                )
            }
            Core::RelNet => {
                let (p, h) = (d.relnet_projection, d.relnet_hidden);
                (
                    CoreModule::RelNet(RelNetCore {
                        projection: Linear::new(st, "relnet.projection", feat, p, true),
                        g: vec![
                            Linear::new(st, "relnet.g0", 2 * p + s, h, true),
                            Linear::new(st, "relnet.g1", h, h, true),
                        ],
                        f: Linear::new(st, "relnet.f", h, h, true),
                    }),
                    h,
                )
            }
            Core::Film => {
                let n = config.film_layer_count;
                let blocks = (0..n)
                    .map(|i| {
                        (
                            Spatial::new(st, &format!("film.block{i}.layer"), config.core_layers, c, c, false),
                            BatchNorm::new(st, &format!("film.block{i}.bn"), c, false),
                        )
                    })
                    .collect();
                (
                    CoreModule::Film(FilmCore {
                        stem: Conv2d::new(st, "film.stem", 1, feat, c, 1, 0, true),
                        generator: FilmGenerator::new(st, "film.generator", s, c, n),
                        blocks,
                        out: Linear::new(st, "film.out", c, d.film_out, true),
                    }),
                    d.film_out,
                )
            }
        };
        let classifier = Classifier {
            hidden: Linear::new(st, "classifier.hidden", pre_answer_size, d.classifier_hidden, false),
            bn: BatchNorm::new(st, "classifier.bn", d.classifier_hidden, true),
            out: Linear::new(st, "classifier.out", d.classifier_hidden, 2, true),
        };
        Ok(Model {
            config,
            store,
            image,
            language,
            core,
            classifier,
            pre_answer_size,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn pre_answer_size(&self) -> usize {
        self.pre_answer_size
    }

    pub fn language(&self) -> Option<&LanguageModule> {
        self.language.as_ref()
    }

    /// Image features (with coordinates when enabled) for a batch.
    pub fn features(&self, g: &mut Graph<'_, T>, batch: &Batch) -> NnResult<Option<Var>> {
        let Some(image) = &self.image else { return Ok(None) };
        let d = self.config.dims();
        if batch.height != d.canvas || batch.width != d.canvas {
            return Err(NnError::Shape(format!(
                "{}×{} images for a {}-pixel model",
                batch.height, batch.width, d.canvas
            )));
        }
        let data = batch.images.iter().map(|&v| T::of(v as f64)).collect();
        let x = g.tape.constant(Tensor::new(vec![batch.size, batch.height, batch.width, 3], data));
        let f = image.forward(g, x)?;
        Ok(Some(if self.config.coords { append_coords(g, f)? } else { f }))
    }

    pub fn sentence(&self, g: &mut Graph<'_, T>, batch: &Batch) -> NnResult<Option<Var>> {
        let Some(lang) = &self.language else { return Ok(None) };
        lang.forward(g, &batch.tokens, batch.size, batch.max_len, &batch.lengths).map(Some)
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &Batch) -> NnResult<Forward> {
        let features = self.features(g, batch)?;
        let sentence = self.sentence(g, batch)?;
        let core = self.core_forward(g, features, sentence, batch.size)?;
        let logits = self.classify(g, core.pre_answer)?;
        Ok(Forward {
            logits,
            pre_answer: core.pre_answer,
            features,
            sentence,
            attention: core.attention,
            pairs: core.pairs,
        })
    }

    /// Runs the core on given features and sentence embeddings. A missing
    /// modality is replaced by zeros.
    pub fn core_forward(
        &self,
        g: &mut Graph<'_, T>,
        features: Option<Var>,
        sentence: Option<Var>,
        n: usize,
    ) -> NnResult<CoreOutput> {
        let d = self.config.dims();
        let c = d.image_channels;
        let feat_c = c + if self.config.coords { 2 } else { 0 };
        let grid = d.grid();
        let features = match features {
            Some(f) => f,
            None => g.tape.constant(Tensor::zeros(&[n, grid, grid, feat_c])),
        };
        let q = match sentence {
            Some(q) => q,
            None => g.tape.constant(Tensor::zeros(&[n, self.config.sentence_size()])),
        };
        let mut attention = Vec::new();
        let mut pairs = None;
        let out = match &self.core {
            CoreModule::CnnLstm(core) => {
                let p = core.position.forward(g, features)?;
                let p = g.tape.relu(p);
                let pooled = g.tape.mean_pool(p)?;
                let joint = g.tape.concat(&[pooled, q])?;
                let h = core.hidden.forward(g, joint)?;
                g.tape.relu(h)
            }
            CoreModule::Fused(stack) => stack.forward(g, features, q)?,
            CoreModule::San(core) => {
                let fs = g.tape.shape(features).to_vec();
                let positions = fs[1] * fs[2];
                let v = core.values.forward(g, features)?;
                let v = g.tape.relu(v);
                let v = g.tape.reshape(v, &[n, positions, d.san])?;
                let mut u = core.query.forward(g, q)?;
                for (wi, wq, wp) in &core.rounds {
                    let hi = wi.forward(g, v)?;
                    let hq = wq.forward(g, u)?;
                    let hq = g.tape.tile(hq, positions)?;
                    let h = g.tape.add(hi, hq)?;
                    let h = g.tape.tanh(h);
                    let logits = wp.forward(g, h)?;
                    let logits = g.tape.reshape(logits, &[n, positions])?;
                    let p = g.tape.softmax(logits);
                    attention.push(p);
                    let read = g.tape.attend(p, v)?;
                    u = g.tape.add(read, u)?;
                }
                u
            }
            CoreModule::RelNet(core) => {
                let o = core.projection.forward(g, features)?;
                let mut h = g.tape.pair_concat(o, q)?;
                pairs = Some(h);
                for layer in &core.g {
                    let y = layer.forward(g, h)?;
                    h = g.tape.relu(y);
                }
                let summed = g.tape.sum_pool(h)?;
                let y = core.f.forward(g, summed)?;
                g.tape.relu(y)
            }
            CoreModule::Film(core) => {
                let x = core.stem.forward(g, features)?;
                let mut x = g.tape.relu(x);
                let coeffs = core.generator.forward(g, q)?;
                for (k, (layer, bn)) in core.blocks.iter().enumerate() {
                    let y = layer.forward(g, x)?;
                    let y = bn.forward(g, y)?;
                    let (gamma, beta) = core.generator.block(g, coeffs, k)?;
                    let y = g.tape.film(y, gamma, beta)?;
                    let y = g.tape.relu(y);
                    x = g.tape.add(x, y)?;
                }
                let y = core.out.forward(g, x)?;
                let y = g.tape.relu(y);
                g.tape.mean_pool(y)?
            }
        };
        Ok(CoreOutput {
            pre_answer: out,
            attention,
            pairs,
        })
    }

    pub fn classify(&self, g: &mut Graph<'_, T>, pre_answer: Var) -> NnResult<Var> {
        let h = self.classifier.hidden.forward(g, pre_answer)?;
        let h = self.classifier.bn.forward(g, h)?;
        let h = g.tape.relu(h);
        self.classifier.out.forward(g, h)
    }
}

/// Number of trainable scalars of a configuration.
pub fn parameter_count(config: &ModelConfig, vocab_size: usize) -> Result<usize, ConfigError> {
    Ok(Model::<f32>::build(*config, vocab_size, 0)?.parameter_count())
}

/// Predicted class per row of `[N, 2]` logits; ties go to class 0.
pub fn predictions<T: Float>(logits: &Tensor<T>) -> Vec<usize> {
    logits
        .data
        .chunks(logits.last_dim())
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
