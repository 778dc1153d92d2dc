//! The ISTAR network: a feature lift, K unfolded ISTA blocks, a residual
//! padding stage, and sub-pixel upscaling.
//!
//! Each ISTA block mirrors one solver iteration in feature space. The
//! multi-scale exploration (MSE) and multi-scale attention (MSA) stages
//! realize the learned `(E - alpha D^T D)` map, a 1x1 convolution folds in
//! the precomputed `D^T y` features, and the ST stage applies a learned
//! per-element soft threshold. `D^T y` is computed once by the lift and
//! shared by all K blocks.
//!
//! All spatial convolutions are stride 1 with zero padding chosen to
//! preserve height and width; only the final pixel shuffle changes
//! resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use indexmap::IndexMap;

use crate::autodiff::{Graph, NodeId};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

/// Reference parameter total (millions) this architecture is sized against.
pub const REFERENCE_PARAMS_M: f64 = 5.05;

/// Structural hyperparameters of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Upscaling factor.
    pub scale: usize,
    /// Feature width C of every block stage.
    pub channels: usize,
    /// Number of unfolded ISTA blocks K.
    pub iterations: usize,
    /// Bottleneck width of the ST stage.
    pub st_channels: usize,
    /// Input/output image channels.
    pub colors: usize,
}

impl ModelConfig {
    /// Paper-scale defaults: 64 channels, 16 blocks, RGB.
    pub fn new(scale: usize) -> Self {
        ModelConfig {
            scale,
            channels: 64,
            iterations: 16,
            st_channels: 16,
            colors: 3,
        }
    }

    /// Reduced configuration for desk-scale runs; the ST bottleneck tracks
    /// the feature width at one quarter.
    pub fn with_dims(scale: usize, channels: usize, iterations: usize) -> Self {
        ModelConfig {
            scale,
            channels,
            iterations,
            st_channels: (channels / 4).max(1),
            colors: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 || self.scale > 8 {
            return Err(Error::Config(format!("scale {} out of range 1..=8", self.scale)));
        }
        for (what, v) in [
            ("channels", self.channels),
            ("iterations", self.iterations),
            ("st_channels", self.st_channels),
            ("colors", self.colors),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be >= 1")));
            }
        }
        Ok(())
    }
}

enum InitKind {
    /// Uniform in +-sqrt(6 / fan_in), scaled by `gain`.
    ConvWeight { fan_in: usize, gain: f64 },
    Zero,
    One,
}

/// One named tensor of the canonical topology.
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: InitKind,
}

fn push_conv(specs: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize, k: usize, gain: f64) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![cout, cin, k, k],
        init: InitKind::ConvWeight {
            fan_in: cin * k * k,
            gain,
        },
    });
    specs.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![cout],
        init: InitKind::Zero,
    });
}

/// Canonical enumeration of every trainable tensor, in checkpoint order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let c = config.channels;
    let s = config.st_channels;
    let colors = config.colors;
    let r2 = config.scale * config.scale;
    let mut specs = Vec::new();

    push_conv(&mut specs, "head", c, colors, 3, 1.0);
    push_conv(&mut specs, "dt.conv1", c, c, 3, 1.0);
    push_conv(&mut specs, "dt.conv2", c, c, 3, 1.0);

    for k in 1..=config.iterations {
        let p = format!("block{k}");
        // multi-scale exploration: 1x1, 3x3, and 5x5 separated into two 3x3
        push_conv(&mut specs, &format!("{p}.mse.b1"), c, c, 1, 1.0);
        push_conv(&mut specs, &format!("{p}.mse.b3"), c, c, 3, 1.0);
        push_conv(&mut specs, &format!("{p}.mse.b5a"), c, c, 3, 1.0);
        push_conv(&mut specs, &format!("{p}.mse.b5b"), c, c, 3, 1.0);
        push_conv(&mut specs, &format!("{p}.mse.fuse"), c, 3 * c, 1, 1.0);
        // multi-scale attention: same three scales, two combining convs
        push_conv(&mut specs, &format!("{p}.msa.b1"), c, c, 1, 1.0);
        push_conv(&mut specs, &format!("{p}.msa.b3"), c, c, 3, 1.0);
        push_conv(&mut specs, &format!("{p}.msa.b5a"), c, c, 3, 1.0);
        push_conv(&mut specs, &format!("{p}.msa.b5b"), c, c, 3, 1.0);
        push_conv(&mut specs, &format!("{p}.msa.conv1"), c, 3 * c, 1, 1.0);
        push_conv(&mut specs, &format!("{p}.msa.conv2"), c, c, 1, 1.0);
        // fold the shared D^T y features into the stream
        push_conv(&mut specs, &format!("{p}.fuse"), c, 2 * c, 1, 1.0);
        // learned soft threshold through a 1x1 bottleneck
        push_conv(&mut specs, &format!("{p}.st.conv1"), s, c, 1, 1.0);
        push_conv(&mut specs, &format!("{p}.st.conv2"), c, s, 1, 1.0);
        specs.push(ParamSpec {
            name: format!("{p}.st.theta_max"),
            shape: vec![1],
            init: InitKind::One,
        });
        // padding structure on the block skip; final conv damped at init
        push_conv(&mut specs, &format!("{p}.pad.conv1"), c, c, 3, 1.0);
        push_conv(&mut specs, &format!("{p}.pad.conv2"), c, c, 3, 0.1);
    }

    push_conv(&mut specs, "tail.pad.conv1", c, c, 3, 1.0);
    push_conv(&mut specs, "tail.pad.conv2", c, c, 3, 0.1);
    push_conv(&mut specs, "up.conv", colors * r2, c, 3, 1.0);
    specs
}

/// Exact trainable scalar count for a configuration.
pub fn param_count(config: &ModelConfig) -> usize {
    param_specs(config)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Parameter totals grouped by stage; `block (each)` counts one block.
pub fn param_breakdown(config: &ModelConfig) -> Vec<(String, usize)> {
    let mut head = 0usize;
    let mut dt = 0usize;
    let mut block1 = 0usize;
    let mut blocks = 0usize;
    let mut tail = 0usize;
    let mut up = 0usize;
    for s in param_specs(config) {
        let n: usize = s.shape.iter().product();
        if s.name.starts_with("head") {
            head += n;
        } else if s.name.starts_with("dt.") {
            dt += n;
        } else if s.name.starts_with("block") {
            blocks += n;
            if s.name.starts_with("block1.") {
                block1 += n;
            }
        } else if s.name.starts_with("tail.") {
            tail += n;
        } else if s.name.starts_with("up.") {
            up += n;
        }
    }
    vec![
        ("head".into(), head),
        ("dt_branch".into(), dt),
        ("ista_block (each)".into(), block1),
        (format!("ista_blocks (x{})", config.iterations), blocks),
        ("tail_padding".into(), tail),
        ("upscale".into(), up),
        ("total".into(), head + dt + blocks + tail + up),
    ]
}

/// Multiply-accumulate estimate for one forward pass on an `h x w` input:
/// sum over convolutions of `Cout * Cin * kh * kw * H' * W'`. All stages run
/// at input resolution.
pub fn estimate_macs(config: &ModelConfig, h: usize, w: usize) -> u64 {
    let mut macs = 0u64;
    for s in param_specs(config) {
        if let [cout, cin, kh, kw] = s.shape[..] {
            macs += (cout * cin * kh * kw) as u64 * (h * w) as u64;
        }
    }
    macs
}

/// Node handles for one registration of the parameters in a [`Graph`].
pub struct Binding {
    ids: IndexMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("binding", format!("unknown parameter {name}")))
    }
}

/// ISTAR model: a configuration plus its parameter store.
pub struct IstarModel<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> std::fmt::Debug for IstarModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "IstarModel {{ config: {:?}, params: {} tensors / {} scalars }}",
            self.config,
            self.params.len(),
            self.params.total_params()
        )
    }
}

impl<T: Element> IstarModel<T> {
    /// Fresh model with seeded uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in param_specs(&config) {
            let numel: usize = spec.shape.iter().product();
            let tensor = match spec.init {
                InitKind::Zero => Tensor::zeros(&spec.shape),
                InitKind::One => Tensor::full(&spec.shape, T::ONE),
                InitKind::ConvWeight { fan_in, gain } => {
                    let bound = (6.0 / fan_in as f64).sqrt() * gain;
                    let data: Vec<T> = (0..numel)
                        .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
                        .collect();
                    Tensor::from_vec(&spec.shape, data)?
                }
            };
            params.insert(spec.name, tensor)?;
        }
        Ok(IstarModel { config, params })
    }

    /// Wrap an existing store, checking it against the canonical topology:
    /// any missing, extra, misordered, or misshapen tensor is an error.
    pub fn from_store(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if params.len() != specs.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, name) in specs.iter().zip(params.names()) {
            if spec.name != name {
                return Err(Error::CheckpointMismatch(format!(
                    "expected tensor {}, found {}",
                    spec.name, name
                )));
            }
        }
        for spec in &specs {
            let got = params.get(&spec.name).expect("name checked").shape();
            if got != spec.shape {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name, got, spec.shape
                )));
            }
        }
        Ok(IstarModel { config, params })
    }

    pub fn count_params(&self) -> usize {
        self.params.total_params()
    }

    /// Register every parameter as a named graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        let mut ids = IndexMap::new();
        for (name, entry) in self.params.iter() {
            ids.insert(name.to_string(), g.param(name, entry.value.clone()));
        }
        Binding { ids }
    }

    /// Stride-1 convolution by parameter prefix, padding inferred from the
    /// kernel so height and width are preserved.
    fn conv(&self, g: &mut Graph<T>, bind: &Binding, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = bind.id(&format!("{prefix}.w"))?;
        let b = bind.id(&format!("{prefix}.b"))?;
        let k = g.value(w).shape()[2];
        g.conv2d(x, w, b, 1, k / 2)
    }

    /// Feature lift: `I_hat = conv(x)` and the shared `D^T y` features
    /// `dty = conv(relu(conv(I_hat)))`, both at input resolution.
    pub fn lift(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        input: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let shape = g.value(input).shape();
        if shape.len() != 4 || shape[1] != self.config.colors {
            return Err(Error::shape(
                "lift",
                format!(
                    "expected [B, {}, H, W] input, got {shape:?}",
                    self.config.colors
                ),
            ));
        }
        let i_hat = self.conv(g, bind, "head", input)?;
        let t = self.conv(g, bind, "dt.conv1", i_hat)?;
        let t = g.relu(t)?;
        let dty = self.conv(g, bind, "dt.conv2", t)?;
        Ok((i_hat, dty))
    }

    /// Multi-scale exploration: parallel 1x1 / 3x3 / separated-5x5 branches,
    /// concatenated, rectified, and fused back to width C.
    pub fn mse_block(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        k: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = format!("block{k}.mse");
        let b1 = self.conv(g, bind, &format!("{p}.b1"), x)?;
        let b3 = self.conv(g, bind, &format!("{p}.b3"), x)?;
        let t = self.conv(g, bind, &format!("{p}.b5a"), x)?;
        let t = g.relu(t)?;
        let b5 = self.conv(g, bind, &format!("{p}.b5b"), t)?;
        let cat = g.concat_channel(b1, b3)?;
        let cat = g.concat_channel(cat, b5)?;
        let h = g.relu(cat)?;
        self.conv(g, bind, &format!("{p}.fuse"), h)
    }

    /// Multi-scale attention: the same three scales feed two combining
    /// convolutions and a sigmoid; the resulting map in (0, 1) gates `x`
    /// multiplicatively.
    pub fn msa_block(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        k: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = format!("block{k}.msa");
        let b1 = self.conv(g, bind, &format!("{p}.b1"), x)?;
        let b3 = self.conv(g, bind, &format!("{p}.b3"), x)?;
        let t = self.conv(g, bind, &format!("{p}.b5a"), x)?;
        let t = g.relu(t)?;
        let b5 = self.conv(g, bind, &format!("{p}.b5b"), t)?;
        let cat = g.concat_channel(b1, b3)?;
        let cat = g.concat_channel(cat, b5)?;
        let h = self.conv(g, bind, &format!("{p}.conv1"), cat)?;
        let h = g.relu(h)?;
        let h = self.conv(g, bind, &format!("{p}.conv2"), h)?;
        let h = g.relu(h)?;
        let attention = g.sigmoid(h)?;
        g.mul(x, attention)
    }

    /// Learned soft threshold: a 1x1 bottleneck predicts a nonnegative
    /// per-element threshold map `theta = theta_max * sigmoid(...)`, then
    /// `soft_threshold(x, theta)`.
    pub fn st_block(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        k: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = format!("block{k}.st");
        let h = self.conv(g, bind, &format!("{p}.conv1"), x)?;
        let h = g.relu(h)?;
        let z = self.conv(g, bind, &format!("{p}.conv2"), h)?;
        let s = g.sigmoid(z)?;
        let theta_max = bind.id(&format!("{p}.theta_max"))?;
        let theta = g.mul(theta_max, s)?;
        g.soft_threshold(x, theta)
    }

    /// conv -> relu -> conv, the "padding" nonlinearity used on skips.
    fn padding(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let t = self.conv(g, bind, &format!("{prefix}.conv1"), x)?;
        let t = g.relu(t)?;
        self.conv(g, bind, &format!("{prefix}.conv2"), t)
    }

    /// One unfolded iteration: MSE and MSA realize the learned
    /// `(E - alpha D^T D)` term, a 1x1 convolution folds in `dty`, the ST
    /// stage thresholds, and a padding structure rides the skip connection.
    pub fn ista_block(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        k: usize,
        prev: NodeId,
        dty: NodeId,
    ) -> Result<NodeId> {
        let u = self.mse_block(g, bind, k, prev)?;
        let u = self.msa_block(g, bind, k, u)?;
        let cat = g.concat_channel(u, dty)?;
        let v = self.conv(g, bind, &format!("block{k}.fuse"), cat)?;
        let w = self.st_block(g, bind, k, v)?;
        let p = self.padding(g, bind, &format!("block{k}.pad"), w)?;
        g.add(w, p)
    }

    /// Full forward pass on a bound graph: lift, K blocks, residual padding,
    /// upscale convolution, pixel shuffle. Output is `[B, colors, rH, rW]`,
    /// finite but not clipped to [0, 1].
    pub fn forward_bound(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        input: NodeId,
    ) -> Result<NodeId> {
        let (i_hat, dty) = self.lift(g, bind, input)?;
        let mut s = i_hat;
        for k in 1..=self.config.iterations {
            s = self.ista_block(g, bind, k, s, dty)?;
        }
        let tail = self.padding(g, bind, "tail.pad", s)?;
        let sr = g.add(i_hat, tail)?;
        let up = self.conv(g, bind, "up.conv", sr)?;
        g.pixel_shuffle(up, self.config.scale)
    }

    /// Convenience forward: bind, push the input, run.
    pub fn forward(&self, g: &mut Graph<T>, input: &Tensor<T>) -> Result<NodeId> {
        let bind = self.bind(g);
        let x = g.constant(input.clone());
        self.forward_bound(g, &bind, x)
    }

    /// Inference without keeping gradients; returns the output tensor.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input)?;
        Ok(g.value(out).clone())
    }
}
