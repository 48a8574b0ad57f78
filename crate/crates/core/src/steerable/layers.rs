use super::projector::kernel_projector;
use crate::group::{BlockKind, FeatureMap, FieldType};
use crate::tensor::{Checkpoint, ParamId, ParamStore, SparseMatrix, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::{Arc, Mutex};

/// Realized kernel cached for gradient-free forwards, keyed on the store id
/// and parameter version.
#[derive(Default)]
struct KernelCache<T> {
    slot: Mutex<Option<(u64, u64, Tensor<T>)>>,
}

impl<T> Clone for KernelCache<T> {
    fn clone(&self) -> Self {
        Self { slot: Mutex::new(None) }
    }
}

/// Convolution whose kernel is the equivariant projection of a raw kernel.
#[derive(Clone)]
pub struct SteerableConv<T: Scalar> {
    in_field: FieldType,
    out_field: FieldType,
    k: usize,
    pad: usize,
    raw: ParamId,
    bias: Option<ParamId>,
    projector: Arc<SparseMatrix>,
    bias_map: Option<Arc<SparseMatrix>>,
    project: bool,
    cache: KernelCache<T>,
}

impl<T: Scalar> SteerableConv<T> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_field: &FieldType,
        out_field: &FieldType,
        k: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let projector = Arc::new(kernel_projector(in_field, out_field, k)?);
        let (o, i) = (out_field.total_dim(), in_field.total_dim());
        let raw: Vec<f64> = (0..o * i * k * k).map(|_| rng.sample(StandardNormal)).collect();
        let mut kernel = projector.apply(&raw);
        // He-style scaling of the realized kernel: Var[w] = 2 / fan_in.
        let ms = kernel.iter().map(|v| v * v).sum::<f64>() / kernel.len().max(1) as f64;
        let target = 2.0 / (i * k * k) as f64;
        if ms > 0.0 {
            let s = (target / ms).sqrt();
            kernel.iter_mut().for_each(|v| *v *= s);
        }
        let raw = store.add(
            format!("{name}/kernel"),
            Tensor::new(vec![o, i, k, k], kernel.into_iter().map(T::of).collect())?,
        );

        let mut triplets = Vec::new();
        let mut nb = 0;
        for (offset, kind) in out_field.block_offsets() {
            match kind {
                BlockKind::Trivial => triplets.push((offset, nb, 1.0)),
                BlockKind::Regular => triplets.extend((0..out_field.order()).map(|j| (offset + j, nb, 1.0))),
                BlockKind::Standard => continue,
            }
            nb += 1;
        }
        let (bias, bias_map) = if nb > 0 {
            (
                Some(store.add(format!("{name}/bias"), Tensor::zeros(&[nb]))),
                Some(Arc::new(SparseMatrix::from_triplets(o, nb, triplets, 0.0))),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            in_field: in_field.clone(),
            out_field: out_field.clone(),
            k,
            pad,
            raw,
            bias,
            projector,
            bias_map,
            project: true,
            cache: KernelCache::default(),
        })
    }

    pub fn in_field(&self) -> &FieldType {
        &self.in_field
    }

    pub fn out_field(&self) -> &FieldType {
        &self.out_field
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn raw_param(&self) -> ParamId {
        self.raw
    }

    /// Number of free parameters: the rank of the kernel projector (its
    /// trace) plus biases.
    pub fn effective_params(&self) -> usize {
        let nb = self.bias_map.as_ref().map_or(0, |m| m.cols());
        let p = &self.projector;
        let trace: f64 = (0..p.rows())
            .map(|r| p.row(r).filter(|&(c, _)| c == r).map(|(_, v)| v).sum::<f64>())
            .sum();
        trace.round() as usize + nb
    }

    /// The kernel the convolution uses, `(out_dim, in_dim, k, k)`.
    pub fn realized_kernel(&self, store: &ParamStore<T>) -> Tensor<T> {
        let raw = store.get(self.raw);
        if !self.project {
            return raw.clone();
        }
        let key = (store.uid(), store.version(self.raw));
        let mut slot = self.cache.slot.lock().expect("kernel cache poisoned");
        if let Some((uid, ver, t)) = slot.as_ref() {
            if (*uid, *ver) == key {
                return t.clone();
            }
        }
        let t = Tensor::new(raw.shape().to_vec(), self.projector.apply(raw.data())).expect("projector preserves size");
        *slot = Some((key.0, key.1, t.clone()));
        t
    }

    fn forward(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = store.get(self.raw).shape().to_vec();
        let w = if !tape.grad_enabled() {
            tape.constant(self.realized_kernel(store))
        } else {
            let raw = tape.bind(store, self.raw);
            if self.project {
                tape.sparse_linear(raw, self.projector.clone(), &shape)?
            } else {
                raw
            }
        };
        let y = tape.conv2d(x, w, self.pad)?;
        match (self.bias, &self.bias_map) {
            (Some(b), Some(map)) => {
                let b = tape.bind(store, b);
                let per_channel = tape.sparse_linear(b, map.clone(), &[self.out_field.total_dim()])?;
                tape.add_channel_bias(y, per_channel)
            }
            _ => Ok(y),
        }
    }
}

/// Unconstrained convolution for the baselines.
#[derive(Clone)]
pub struct PlainConv {
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    weight: ParamId,
    bias: ParamId,
}

impl PlainConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w: Vec<T> = (0..c_out * c_in * k * k)
            .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let weight = store.add(format!("{name}/kernel"), Tensor::new(vec![c_out, c_in, k, k], w)?);
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[c_out]));
        Ok(Self {
            c_in,
            c_out,
            k,
            pad,
            weight,
            bias,
        })
    }

    pub fn params(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + self.c_out
    }
}

/// One stage of a [`Network`].
#[derive(Clone)]
pub enum Layer<T: Scalar> {
    Steerable(SteerableConv<T>),
    Plain(PlainConv),
    /// Pointwise ReLU; only legal on trivial and regular fields.
    Relu,
    /// Spatial 2x2 max pooling with stride 2.
    MaxPool,
    /// Max over the `n` channels of every regular block.
    GroupMaxPool { n: usize, blocks: usize },
}

/// Pointwise ReLU on a feature map, rejecting standard blocks.
pub fn equivariant_relu<T: Scalar>(map: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if map.field().contains(BlockKind::Standard) {
        return Err(Error::FieldMismatch(format!(
            "pointwise ReLU is not equivariant on standard blocks ({})",
            map.field()
        )));
    }
    let data = map.data().iter().map(|&v| v.max(T::zero())).collect();
    FeatureMap::new(map.field().clone(), map.height(), map.width(), data)
}

/// Max over the coordinates of every regular block, giving one trivial
/// channel per block.
pub fn group_max_pool<T: Scalar>(map: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let field = map.field();
    if field.blocks().iter().any(|&b| b != BlockKind::Regular) {
        return Err(Error::FieldMismatch(format!("group max pool needs regular blocks, got {field}")));
    }
    let n = field.order();
    let hw = map.height() * map.width();
    let blocks = field.blocks().len();
    let mut data = vec![T::neg_infinity(); blocks * hw];
    for b in 0..blocks {
        for j in 0..n {
            let src = map.channel(b * n + j);
            for (d, &s) in data[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                if s > *d {
                    *d = s;
                }
            }
        }
    }
    FeatureMap::new(FieldType::trivial(n, blocks), map.height(), map.width(), data)
}

/// A feed-forward stack of layers with its own parameters.
#[derive(Clone)]
pub struct Network<T: Scalar> {
    layers: Vec<Layer<T>>,
    params: ParamStore<T>,
    in_field: FieldType,
    out_field: FieldType,
}

impl<T: Scalar> Network<T> {
    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn in_field(&self) -> &FieldType {
        &self.in_field
    }

    pub fn out_field(&self) -> &FieldType {
        &self.out_field
    }

    /// Number of convolution stages.
    pub fn conv_stages(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Steerable(_) | Layer::Plain(_)))
            .count()
    }

    /// Free parameters: basis dimensions for steerable layers, raw weight
    /// counts for plain ones.
    pub fn effective_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Steerable(c) => c.effective_params(),
                Layer::Plain(c) => c.params(),
                _ => 0,
            })
            .sum()
    }

    /// Turns kernel projection off (or back on); used to check that the
    /// equivariance tests can detect an unconstrained layer.
    pub fn set_projection(&mut self, enabled: bool) {
        for l in &mut self.layers {
            if let Layer::Steerable(c) = l {
                c.project = enabled;
                *c.cache.slot.lock().expect("kernel cache poisoned") = None;
            }
        }
    }

    /// Applies the stack to `x` (`B x C x H x W`).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied();
        if c != Some(self.in_field.total_dim()) {
            return Err(Error::FieldMismatch(format!(
                "network expects {} channels, input has shape {:?}",
                self.in_field.total_dim(),
                tape.shape(x)
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Steerable(conv) => conv.forward(tape, &self.params, h)?,
                Layer::Plain(conv) => {
                    let w = tape.bind(&self.params, conv.weight);
                    let b = tape.bind(&self.params, conv.bias);
                    let y = tape.conv2d(h, w, conv.pad)?;
                    tape.add_channel_bias(y, b)?
                }
                Layer::Relu => tape.relu(h),
                Layer::MaxPool => tape.max_pool2d(h)?,
                Layer::GroupMaxPool { n, blocks } => {
                    let s = tape.shape(h).to_vec();
                    let r = tape.reshape(h, &[s[0], *blocks, *n, s[2], s[3]])?;
                    tape.max_axis(r, 2)?
                }
            };
        }
        Ok(h)
    }

    /// Gradient-free forward of a single feature map.
    pub fn forward_map(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.field() != &self.in_field {
            return Err(Error::FieldMismatch(format!(
                "network input is {}, got {}",
                self.in_field,
                x.field()
            )));
        }
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let input = tape.constant(Tensor::new(
            vec![1, x.channels(), x.height(), x.width()],
            x.data().to_vec(),
        )?);
        let y = self.forward(&mut tape, input)?;
        let s = tape.shape(y).to_vec();
        FeatureMap::new(self.out_field.clone(), s[2], s[3], tape.value(y).data().to_vec())
    }

    /// Raw parameters plus every steerable layer's field descriptors.
    pub fn to_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.push_store(prefix, &self.params);
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Steerable(c) = l {
                for (tag, f) in [("in_field", &c.in_field), ("out_field", &c.out_field)] {
                    let code = f.encode();
                    ckpt.push(
                        format!("{prefix}/fields/{i}/{tag}"),
                        Tensor::new(vec![code.len()], code).expect("1-d"),
                    );
                }
            }
        }
    }

    /// Loads parameters saved by [`Network::to_checkpoint`], checking that the
    /// stored field descriptors match this architecture.
    pub fn load_checkpoint(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Steerable(c) = l {
                for (tag, f) in [("in_field", &c.in_field), ("out_field", &c.out_field)] {
                    let key = format!("{prefix}/fields/{i}/{tag}");
                    let stored = ckpt
                        .get(&key)
                        .and_then(|t| FieldType::decode(t.data()))
                        .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{key}`")))?;
                    if &stored != f {
                        return Err(Error::FieldMismatch(format!("layer {i}: stored {stored}, network {f}")));
                    }
                }
            }
        }
        ckpt.load_store(prefix, &mut self.params)
    }
}

/// Builds a [`Network`] stage by stage, tracking the field type.
pub struct NetworkBuilder<'r, T: Scalar, R: Rng + ?Sized> {
    layers: Vec<Layer<T>>,
    params: ParamStore<T>,
    in_field: FieldType,
    field: FieldType,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng + ?Sized> NetworkBuilder<'r, T, R> {
    pub fn new(in_field: FieldType, rng: &'r mut R) -> Self {
        Self {
            layers: Vec::new(),
            params: ParamStore::new(),
            field: in_field.clone(),
            in_field,
            rng,
        }
    }

    pub fn field(&self) -> &FieldType {
        &self.field
    }

    fn name(&self) -> String {
        format!("l{}", self.layers.len())
    }

    pub fn steerable(mut self, out: FieldType, k: usize, pad: usize) -> Result<Self> {
        let name = self.name();
        let conv = SteerableConv::new(&mut self.params, &name, &self.field, &out, k, pad, self.rng)?;
        self.layers.push(Layer::Steerable(conv));
        self.field = out;
        Ok(self)
    }

    /// Plain convolution; the output is labelled with trivial fields, which
    /// only records its channel count.
    pub fn plain(mut self, c_out: usize, k: usize, pad: usize) -> Result<Self> {
        let name = self.name();
        let conv = PlainConv::new(&mut self.params, &name, self.field.total_dim(), c_out, k, pad, self.rng)?;
        self.layers.push(Layer::Plain(conv));
        self.field = FieldType::trivial(self.field.order(), c_out);
        Ok(self)
    }

    pub fn relu(mut self) -> Result<Self> {
        if self.field.contains(BlockKind::Standard) {
            return Err(Error::FieldMismatch(format!(
                "pointwise ReLU is not equivariant on standard blocks ({})",
                self.field
            )));
        }
        self.layers.push(Layer::Relu);
        Ok(self)
    }

    pub fn max_pool(mut self) -> Self {
        self.layers.push(Layer::MaxPool);
        self
    }

    pub fn group_max_pool(mut self) -> Result<Self> {
        if self.field.blocks().iter().any(|&b| b != BlockKind::Regular) {
            return Err(Error::FieldMismatch(format!(
                "group max pool needs regular blocks, got {}",
                self.field
            )));
        }
        let (n, blocks) = (self.field.order(), self.field.blocks().len());
        self.layers.push(Layer::GroupMaxPool { n, blocks });
        self.field = FieldType::trivial(n, blocks);
        Ok(self)
    }

    pub fn build(self) -> Network<T> {
        Network {
            layers: self.layers,
            params: self.params,
            in_field: self.in_field,
            out_field: self.field,
        }
    }
}
