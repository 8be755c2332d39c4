//! Network assembly: the U-shaped sparse ConvNet, the pointwise MLP
//! baseline, input preparation and inlier prediction.

use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, BatchStats, ParamId, ParamStore, Tape, Var};
use crate::binio::*;
use crate::checkpoint::Checkpoint;
use crate::coords::{quantize, CoordinateMap, Quantized, SparseTensor};
use crate::error::{Error, Result};
use crate::kernel::{build_kernel_map, build_pool_map, region_volume, KernelMap, KernelRegion, KernelShape, PoolMap};
use crate::layers::BN_EPSILON;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unet,
    Mlp,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Unet => "unet",
            ModelKind::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Spatial dimension D of the input coordinates.
    pub dim: usize,
    pub kernel_shape: KernelShape,
    pub kernel_size: usize,
    /// Pyramid depth; 1 means no pooling.
    pub levels: usize,
    /// Feature width per level.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub in_channels: usize,
    pub pool_stride: usize,
    /// Largest kernel region (offset count) a hypercubic kernel may have.
    pub max_kernel_volume: usize,
}

impl NetworkConfig {
    /// Desk-scale defaults: 3 levels of (32, 64, 128) channels, one residual
    /// block per level, cross kernel of size 3, stride-2 pooling.
    pub fn desk_default(dim: usize, in_channels: usize) -> Self {
        Self {
            dim,
            kernel_shape: KernelShape::Cross,
            kernel_size: 3,
            levels: 3,
            channels: vec![32, 64, 128],
            blocks_per_level: 1,
            in_channels,
            pool_stride: 2,
            max_kernel_volume: 729,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("network dimension must be at least 1".into());
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.channels.len() != self.levels {
            return bad(format!("{} channel widths given for {} levels", self.channels.len(), self.levels));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.levels > 1 && self.pool_stride < 2 {
            return bad("pool stride must be at least 2".into());
        }
        let volume = region_volume(self.kernel_shape, self.dim, self.kernel_size);
        if self.kernel_shape == KernelShape::Hypercubic && volume.is_none_or(|v| v > self.max_kernel_volume) {
            return bad(format!(
                "hypercubic kernel {}^{} exceeds the kernel volume budget {}; use a cross kernel",
                self.kernel_size, self.dim, self.max_kernel_volume
            ));
        }
        Ok(())
    }

    pub fn region(&self) -> Result<KernelRegion> {
        KernelRegion::new(self.kernel_shape, self.dim, self.kernel_size)
    }
}

/// Per-input execution plan: coordinate maps, kernel maps and pooling maps
/// of every pyramid level. Build once per input and reuse across steps.
#[derive(Clone, Debug)]
pub struct Plan {
    input: SparseTensor,
    levels: Vec<LevelPlan>,
    segments: Vec<Range<usize>>,
}

#[derive(Clone, Debug)]
struct LevelPlan {
    kmap: Arc<KernelMap>,
    pointwise: Arc<KernelMap>,
    /// Pooling from this level to the next.
    pool: Option<Arc<PoolMap>>,
}

impl Plan {
    pub fn new(input: SparseTensor, config: &NetworkConfig, kind: ModelKind) -> Result<Self> {
        if input.spatial_dim() != config.dim {
            return Err(Error::DimensionMismatch { expected: config.dim, got: input.spatial_dim() });
        }
        if input.channels() != config.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, network expects {}",
                input.channels(),
                config.in_channels
            )));
        }
        if input.is_empty() {
            return Err(Error::Empty("network input has no rows"));
        }
        let segments = instance_segments(&input);
        let mut levels = Vec::new();
        if kind == ModelKind::Unet {
            let region = config.region()?;
            let unit = KernelRegion::new(KernelShape::Cross, config.dim, 1)?;
            let mut cur = input.clone();
            for l in 0..config.levels {
                let kmap = Arc::new(build_kernel_map(&cur, cur.map(), &region)?);
                let pointwise = Arc::new(build_kernel_map(&cur, cur.map(), &unit)?);
                let pool = if l + 1 < config.levels {
                    let p = build_pool_map(&cur, config.pool_stride)?;
                    let next = SparseTensor::build_like(&cur, p.out_map().clone(), p.out_stride().to_vec())?;
                    cur = next;
                    Some(Arc::new(p))
                } else {
                    None
                };
                levels.push(LevelPlan { kmap, pointwise, pool });
            }
        }
        Ok(Self { input, levels, segments })
    }

    pub fn input(&self) -> &SparseTensor {
        &self.input
    }

    pub fn rows(&self) -> usize {
        self.input.len()
    }

    /// Coordinate count per pyramid level (U-Net plans only).
    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.kmap.n_out()).collect()
    }

    pub fn kernel_map(&self, level: usize) -> &KernelMap {
        &self.levels[level].kmap
    }
}

impl SparseTensor {
    fn build_like(like: &SparseTensor, map: Arc<CoordinateMap>, stride: Vec<i32>) -> Result<SparseTensor> {
        let n = map.len();
        if like.is_batched() {
            SparseTensor::new_batched(map, Array2::zeros((n, 0)), stride)
        } else {
            SparseTensor::new(map, Array2::zeros((n, 0)), stride)
        }
    }
}

/// Row ranges of the instances in a (possibly batched) tensor.
fn instance_segments(t: &SparseTensor) -> Vec<Range<usize>> {
    if !t.is_batched() {
        return vec![0..t.len()];
    }
    let mut segs: Vec<Range<usize>> = Vec::new();
    let mut last = None;
    for (row, c) in t.map().iter() {
        if last != Some(c[0]) {
            if let Some(s) = segs.last_mut() {
                s.end = row;
            }
            segs.push(row..t.len());
            last = Some(c[0]);
        }
    }
    segs
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    slabs: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
    name: String,
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvNorm,
    b: ConvNorm,
}

#[derive(Clone, Debug)]
struct UnetLayers {
    stem: ConvNorm,
    enc: Vec<Vec<ResBlock>>,
    down: Vec<ConvNorm>,
    up: Vec<Option<ConvNorm>>,
    dec: Vec<Vec<ResBlock>>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct MlpUnit {
    conv: Conv,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct MlpBlock {
    a: MlpUnit,
    b: MlpUnit,
}

#[derive(Clone, Debug)]
struct MlpLayers {
    stages: Vec<(MlpUnit, Vec<MlpBlock>)>,
    head: Conv,
}

#[derive(Clone, Debug)]
enum Layers {
    Unet(Box<UnetLayers>),
    Mlp(MlpLayers),
}

/// A parameterized inlier classifier: sparse tensor in, one logit per row out.
#[derive(Clone, Debug)]
pub struct Network {
    kind: ModelKind,
    config: NetworkConfig,
    store: ParamStore,
    layers: Layers,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
    slabs: usize,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, pointwise: bool) -> Conv {
        let slabs = if pointwise { 1 } else { self.slabs };
        let fan_in = (c_in * slabs) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w = Array2::from_shape_simple_fn((slabs * c_in, c_out), || normal.sample(self.rng));
        Conv {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), Array2::zeros((1, c_out))),
            slabs,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Array2::ones((1, c))),
            beta: self.store.add(format!("{name}.beta"), Array2::zeros((1, c))),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            name: name.to_string(),
        }
    }

    fn conv_norm(&mut self, name: &str, c_in: usize, c_out: usize, pointwise: bool) -> ConvNorm {
        ConvNorm { conv: self.conv(&format!("{name}.conv"), c_in, c_out, pointwise), norm: self.norm(&format!("{name}.bn"), c_out) }
    }

    fn res_block(&mut self, name: &str, c: usize) -> ResBlock {
        ResBlock { a: self.conv_norm(&format!("{name}.a"), c, c, false), b: self.conv_norm(&format!("{name}.b"), c, c, false) }
    }

    fn mlp_unit(&mut self, name: &str, c_in: usize, c_out: usize) -> MlpUnit {
        MlpUnit { conv: self.conv(&format!("{name}.linear"), c_in, c_out, true), norm: self.norm(&format!("{name}.bn"), c_out) }
    }
}

/// Build the U-shaped network:
///
/// ```text
/// stem conv -> [res blocks] -(pool, conv)-> [res blocks] -> ... deepest
///   ... deepest -(unpool, 1x1 conv if widths differ, + skip)-> [res blocks]
///   -> 1x1 head conv -> logit per input row
/// ```
pub fn build_unet(config: &NetworkConfig, rng: &mut Rng) -> Result<Network> {
    config.validate()?;
    let region = config.region()?;
    let mut b = Builder { store: ParamStore::new(), rng, slabs: region.len() };
    let ch = &config.channels;
    let stem = b.conv_norm("stem", config.in_channels, ch[0], false);
    let mut enc = Vec::new();
    let mut down = Vec::new();
    for l in 0..config.levels {
        if l > 0 {
            down.push(b.conv_norm(&format!("down{l}"), ch[l - 1], ch[l], false));
        }
        enc.push((0..config.blocks_per_level).map(|k| b.res_block(&format!("enc{l}.block{k}"), ch[l])).collect());
    }
    let mut up = Vec::new();
    let mut dec = Vec::new();
    for l in 0..config.levels - 1 {
        up.push((ch[l + 1] != ch[l]).then(|| b.conv_norm(&format!("up{l}"), ch[l + 1], ch[l], true)));
        dec.push((0..config.blocks_per_level).map(|k| b.res_block(&format!("dec{l}.block{k}"), ch[l])).collect());
    }
    let head = b.conv("head", ch[0], 1, true);
    let layers = Layers::Unet(Box::new(UnetLayers { stem, enc, down, up, dec, head }));
    Ok(Network { kind: ModelKind::Unet, config: config.clone(), store: b.store, layers })
}

/// Build the pointwise baseline: shared per-row linear layers, each followed
/// by instance normalization (context across rows), batch normalization and
/// ReLU, with residual blocks at every width. No neighbourhood structure.
pub fn build_mlp_baseline(config: &NetworkConfig, rng: &mut Rng) -> Result<Network> {
    config.validate()?;
    let mut b = Builder { store: ParamStore::new(), rng, slabs: 1 };
    let mut stages = Vec::new();
    let mut c_prev = config.in_channels;
    for (l, &c) in config.channels.iter().enumerate() {
        let unit = b.mlp_unit(&format!("stage{l}"), c_prev, c);
        let blocks = (0..config.blocks_per_level)
            .map(|k| MlpBlock {
                a: b.mlp_unit(&format!("stage{l}.block{k}.a"), c, c),
                b: b.mlp_unit(&format!("stage{l}.block{k}.b"), c, c),
            })
            .collect();
        stages.push((unit, blocks));
        c_prev = c;
    }
    let head = b.conv("head", c_prev, 1, true);
    Ok(Network { kind: ModelKind::Mlp, config: config.clone(), store: b.store, layers: Layers::Mlp(MlpLayers { stages, head }) })
}

pub fn build_network(kind: ModelKind, config: &NetworkConfig, rng: &mut Rng) -> Result<Network> {
    match kind {
        ModelKind::Unet => build_unet(config, rng),
        ModelKind::Mlp => build_mlp_baseline(config, rng),
    }
}

struct Pass<'a> {
    tape: &'a mut Tape,
    store: &'a ParamStore,
    train: bool,
    stats: Vec<(String, BatchStats)>,
}

impl Pass<'_> {
    fn conv(&mut self, x: Var, conv: &Conv, level: &LevelPlan) -> Result<Var> {
        let w = self.tape.param(self.store, conv.w);
        let b = self.tape.param(self.store, conv.b);
        let kmap = if conv.slabs == 1 { level.pointwise.clone() } else { level.kmap.clone() };
        self.tape.conv(x, w, b, kmap)
    }

    fn linear(&mut self, x: Var, conv: &Conv) -> Result<Var> {
        let w = self.tape.param(self.store, conv.w);
        let b = self.tape.param(self.store, conv.b);
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, norm: &Norm) -> Result<Var> {
        let gamma = self.tape.param(self.store, norm.gamma);
        let beta = self.tape.param(self.store, norm.beta);
        if self.train {
            let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPSILON)?;
            self.stats.push((norm.name.clone(), stats));
            Ok(y)
        } else {
            self.tape.batch_norm_eval(x, gamma, beta, &norm.running_mean, &norm.running_var, BN_EPSILON)
        }
    }

    fn conv_norm(&mut self, x: Var, cn: &ConvNorm, level: &LevelPlan) -> Result<Var> {
        let y = self.conv(x, &cn.conv, level)?;
        self.norm(y, &cn.norm)
    }

    fn res_block(&mut self, x: Var, blk: &ResBlock, level: &LevelPlan) -> Result<Var> {
        let h = self.conv_norm(x, &blk.a, level)?;
        let h = self.tape.relu(h);
        let h = self.conv_norm(h, &blk.b, level)?;
        let s = self.tape.add(h, x)?;
        Ok(self.tape.relu(s))
    }

    fn mlp_unit(&mut self, x: Var, unit: &MlpUnit, segments: &[Range<usize>]) -> Result<Var> {
        let h = self.linear(x, &unit.conv)?;
        let h = self.tape.instance_norm_segments(h, segments, BN_EPSILON)?;
        self.norm(h, &unit.norm)
    }
}

impl Network {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of weight slabs of every convolution (pointwise layers have 1).
    pub fn conv_slab_counts(&self) -> Vec<usize> {
        let mut v = Vec::new();
        match &self.layers {
            Layers::Unet(l) => {
                v.push(l.stem.conv.slabs);
                for blocks in l.enc.iter().chain(&l.dec) {
                    for blk in blocks {
                        v.extend([blk.a.conv.slabs, blk.b.conv.slabs]);
                    }
                }
                v.extend(l.down.iter().map(|c| c.conv.slabs));
                v.extend(l.up.iter().flatten().map(|c| c.conv.slabs));
                v.push(l.head.slabs);
            }
            Layers::Mlp(l) => {
                for (unit, blocks) in &l.stages {
                    v.push(unit.conv.slabs);
                    for blk in blocks {
                        v.extend([blk.a.conv.slabs, blk.b.conv.slabs]);
                    }
                }
                v.push(l.head.slabs);
            }
        }
        v
    }

    /// Forward pass recording onto `tape`; returns `N x 1` logits aligned with
    /// the plan's input rows. In training mode batch statistics are used and
    /// folded into the running averages.
    pub fn forward(&mut self, tape: &mut Tape, plan: &Plan, train: bool) -> Result<Var> {
        if plan.input.channels() != self.config.in_channels || plan.input.spatial_dim() != self.config.dim {
            return Err(Error::Shape("plan does not match the network input layout".into()));
        }
        let x = tape.leaf(plan.input.features().clone());
        let mut pass = Pass { tape, store: &self.store, train, stats: Vec::new() };
        let out = match &self.layers {
            Layers::Unet(layers) => {
                if plan.levels.len() != self.config.levels {
                    return Err(Error::Shape("plan was not built for a U-Net of this depth".into()));
                }
                unet_forward(&mut pass, layers, plan, x)?
            }
            Layers::Mlp(layers) => mlp_forward(&mut pass, layers, plan, x)?,
        };
        let stats = std::mem::take(&mut pass.stats);
        if train {
            self.fold_stats(stats);
        }
        Ok(out)
    }

    fn norms_mut(&mut self) -> Vec<&mut Norm> {
        let mut v: Vec<&mut Norm> = Vec::new();
        match &mut self.layers {
            Layers::Unet(l) => {
                let l = l.as_mut();
                v.push(&mut l.stem.norm);
                for blocks in l.enc.iter_mut().chain(l.dec.iter_mut()) {
                    for blk in blocks {
                        v.push(&mut blk.a.norm);
                        v.push(&mut blk.b.norm);
                    }
                }
                v.extend(l.down.iter_mut().map(|c| &mut c.norm));
                v.extend(l.up.iter_mut().flatten().map(|c| &mut c.norm));
            }
            Layers::Mlp(l) => {
                for (unit, blocks) in &mut l.stages {
                    v.push(&mut unit.norm);
                    for blk in blocks {
                        v.push(&mut blk.a.norm);
                        v.push(&mut blk.b.norm);
                    }
                }
            }
        }
        v
    }

    fn fold_stats(&mut self, stats: Vec<(String, BatchStats)>) {
        let momentum = crate::layers::BN_MOMENTUM;
        let mut norms = self.norms_mut();
        for (name, s) in stats {
            if let Some(n) = norms.iter_mut().find(|n| n.name == name) {
                let unbiased = if s.rows > 1 { s.rows as f64 / (s.rows as f64 - 1.0) } else { 1.0 };
                n.running_mean = &n.running_mean * (1.0 - momentum) + &s.mean * momentum;
                n.running_var = &n.running_var * (1.0 - momentum) + &s.var * (momentum * unbiased);
            }
        }
    }

    /// Eval-mode logits as a plain vector.
    pub fn logits(&mut self, plan: &Plan) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, plan, false)?;
        Ok(tape.value(out).column(0).to_owned())
    }

    /// Parameters plus normalization running statistics.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, v) in self.store.named() {
            ck.push(name, v.clone());
        }
        let mut norms: Vec<(String, Array1<f64>, Array1<f64>)> = Vec::new();
        let mut me = self.clone();
        for n in me.norms_mut() {
            norms.push((n.name.clone(), n.running_mean.clone(), n.running_var.clone()));
        }
        for (name, m, v) in norms {
            ck.push(format!("{name}.running_mean"), m.insert_axis(Axis(0)));
            ck.push(format!("{name}.running_var"), v.insert_axis(Axis(0)));
        }
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let shape = self.store.value(id).dim();
            let v = ck.take(self.store.name(id), shape)?;
            *self.store.value_mut(id) = v;
        }
        for n in self.norms_mut() {
            let c = n.running_mean.len();
            n.running_mean = ck.take(&format!("{}.running_mean", n.name), (1, c))?.row(0).to_owned();
            n.running_var = ck.take(&format!("{}.running_var", n.name), (1, c))?.row(0).to_owned();
        }
        Ok(())
    }

    /// Model file: `"HDMD"`, version u32 = 1, header length u32, JSON header
    /// `{kind, config}`, then a named-tensor checkpoint.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&ModelHeader { kind: self.kind, config: self.config.clone() })
            .map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"HDMD")?;
        write_u32(w, 1)?;
        write_u32(w, header.len() as u32)?;
        w.write_all(&header)?;
        self.to_checkpoint().write(w)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, b"HDMD", "model")?;
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: ModelHeader = serde_json::from_slice(&header).map_err(|e| Error::Format(e.to_string()))?;
        // Initial values are overwritten by the checkpoint.
        let mut rng = crate::rng::rng_from_seed(0);
        let mut net = build_network(header.kind, &header.config, &mut rng)?;
        net.load_checkpoint(&Checkpoint::read(r)?)?;
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    config: NetworkConfig,
}

fn unet_forward(pass: &mut Pass<'_>, layers: &UnetLayers, plan: &Plan, x: Var) -> Result<Var> {
    let levels = &plan.levels;
    let h = pass.conv_norm(x, &layers.stem, &levels[0])?;
    let mut h = pass.tape.relu(h);
    let mut skips = Vec::with_capacity(levels.len());
    for (l, blocks) in layers.enc.iter().enumerate() {
        if l > 0 {
            let pool = levels[l - 1].pool.clone().expect("pool map between levels");
            let pooled = pass.tape.sum_pool(h, pool)?;
            let d = pass.conv_norm(pooled, &layers.down[l - 1], &levels[l])?;
            h = pass.tape.relu(d);
        }
        for blk in blocks {
            h = pass.res_block(h, blk, &levels[l])?;
        }
        skips.push(h);
    }
    for l in (0..levels.len() - 1).rev() {
        let pool = levels[l].pool.clone().expect("pool map between levels");
        let mut u = pass.tape.sum_unpool(h, pool)?;
        if let Some(cn) = &layers.up[l] {
            u = pass.conv_norm(u, cn, &levels[l])?;
        }
        let s = pass.tape.add(u, skips[l])?;
        h = pass.tape.relu(s);
        for blk in &layers.dec[l] {
            h = pass.res_block(h, blk, &levels[l])?;
        }
    }
    pass.conv(h, &layers.head, &levels[0])
}

fn mlp_forward(pass: &mut Pass<'_>, layers: &MlpLayers, plan: &Plan, x: Var) -> Result<Var> {
    let segs = &plan.segments;
    let mut h = x;
    for (unit, blocks) in &layers.stages {
        let y = pass.mlp_unit(h, unit, segs)?;
        h = pass.tape.relu(y);
        for blk in blocks {
            let a = pass.mlp_unit(h, &blk.a, segs)?;
            let a = pass.tape.relu(a);
            let b = pass.mlp_unit(a, &blk.b, segs)?;
            let s = pass.tape.add(b, h)?;
            h = pass.tape.relu(s);
        }
    }
    pass.linear(h, &layers.head)
}

/// Input features of a point set: coordinates centred on their mean and
/// divided by their RMS radius, plus a constant-one channel.
pub fn point_features(points: ArrayView2<f64>) -> Array2<f64> {
    let (m, d) = points.dim();
    let mut feats = Array2::ones((m, d + 1));
    if m == 0 {
        return feats;
    }
    let mean = points.sum_axis(Axis(0)) / m as f64;
    let centred = &points - &mean;
    let rms = (centred.mapv(|v| v * v).sum() / m as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    feats.slice_mut(ndarray::s![.., ..d]).assign(&(centred * scale));
    feats
}

/// Quantize points with [`point_features`] as features.
pub fn prepare_points(points: ArrayView2<f64>, resolution: f64) -> Result<Quantized> {
    let feats = point_features(points);
    quantize(points, resolution, feats.view())
}

/// Cell labels from point labels: a cell is an inlier when at least half of
/// its points are.
pub fn cell_labels(labels: &[bool], provenance: &[usize], rows: usize) -> Result<Vec<bool>> {
    if labels.len() != provenance.len() {
        return Err(Error::Shape("labels and provenance differ in length".into()));
    }
    let mut pos = vec![0usize; rows];
    let mut all = vec![0usize; rows];
    for (&y, &r) in labels.iter().zip(provenance) {
        if r >= rows {
            return Err(Error::Shape(format!("provenance row {r} out of range")));
        }
        all[r] += 1;
        pos[r] += usize::from(y);
    }
    Ok(pos.iter().zip(&all).map(|(&p, &a)| a > 0 && 2 * p >= a).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probability: Vec<f64>,
    pub inlier: Vec<bool>,
}

/// Per-point inlier probability and decision (`p >= 0.5`) from per-row
/// logits and the quantization provenance.
pub fn predictions_from_logits(logits: &Array1<f64>, provenance: &[usize]) -> Result<Prediction> {
    let mut probability = Vec::with_capacity(provenance.len());
    for &r in provenance {
        let z = *logits
            .get(r)
            .ok_or_else(|| Error::Shape(format!("provenance row {r} outside {} rows", logits.len())))?;
        probability.push(sigmoid(z));
    }
    let inlier = probability.iter().map(|&p| p >= 0.5).collect();
    Ok(Prediction { probability, inlier })
}

pub fn predict_inliers(network: &mut Network, plan: &Plan, provenance: &[usize]) -> Result<Prediction> {
    let logits = network.logits(plan)?;
    predictions_from_logits(&logits, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{numerical_gradient, relative_error};
    use crate::rng::rng_from_seed;
    use ndarray::array;
    use rand::Rng as _;

    fn tiny(dim: usize, levels: usize) -> NetworkConfig {
        NetworkConfig {
            dim,
            kernel_shape: KernelShape::Cross,
            kernel_size: 3,
            levels,
            channels: (0..levels).map(|l| 3 + l).collect(),
            blocks_per_level: 1,
            in_channels: dim + 1,
            pool_stride: 2,
            max_kernel_volume: 729,
        }
    }

    fn random_points(seed: u64, n: usize, dim: usize, extent: f64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_simple_fn((n, dim), || rng.random_range(0.0..extent))
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(2, 2);
        c.levels = 0;
        assert!(c.validate().is_err());
        let mut c = tiny(2, 2);
        c.channels = vec![4];
        assert!(c.validate().is_err());
        let mut c = tiny(8, 1);
        c.kernel_shape = KernelShape::Hypercubic;
        assert!(c.validate().is_err());
        c.dim = 6;
        c.in_channels = 7;
        assert!(c.validate().is_ok());
        let mut c = tiny(2, 1);
        c.kernel_size = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_level_preserves_rows() {
        let cfg = tiny(2, 1);
        let mut net = build_unet(&cfg, &mut rng_from_seed(1)).unwrap();
        let q = prepare_points(random_points(2, 40, 2, 3.0).view(), 0.25).unwrap();
        let plan = Plan::new(q.tensor.clone(), &cfg, ModelKind::Unet).unwrap();
        let logits = net.logits(&plan).unwrap();
        assert_eq!(logits.len(), q.tensor.len());
    }

    #[test]
    fn every_conv_of_a_4d_cross_unet_has_nine_slabs() {
        let cfg = NetworkConfig { levels: 3, channels: vec![2, 3, 4], ..tiny(4, 3) };
        let net = build_unet(&cfg, &mut rng_from_seed(0)).unwrap();
        let counts = net.conv_slab_counts();
        let region_convs: Vec<usize> = counts.iter().copied().filter(|&c| c != 1).collect();
        assert!(!region_convs.is_empty());
        assert!(region_convs.iter().all(|&c| c == 9), "{counts:?}");
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // D=2 cross K=3 (R=5), levels 2, channels (4, 6), one block, C_in=3.
        let cfg = NetworkConfig { channels: vec![4, 6], ..tiny(2, 2) };
        let net = build_unet(&cfg, &mut rng_from_seed(0)).unwrap();
        let r = 5;
        let conv = |ci: usize, co: usize, slabs: usize| slabs * ci * co + co;
        let bn = |c: usize| 2 * c;
        let expected = conv(3, 4, r) + bn(4)                    // stem
            + 2 * (conv(4, 4, r) + bn(4))                       // enc0 block
            + conv(4, 6, r) + bn(6)                             // down1
            + 2 * (conv(6, 6, r) + bn(6))                       // enc1 block
            + conv(6, 4, 1) + bn(4)                             // up0 (widths differ)
            + 2 * (conv(4, 4, r) + bn(4))                       // dec0 block
            + conv(4, 1, 1); // head
        assert_eq!(net.params().numel(), expected);
    }

    #[test]
    fn unet_is_translation_invariant_under_coarse_shifts() {
        // Power-of-two resolution keeps the shifted quantization exact.
        let cfg = tiny(2, 3);
        let mut net = build_unet(&cfg, &mut rng_from_seed(4)).unwrap();
        let res = 0.25;
        let pts = random_points(5, 60, 2, 4.0).mapv(|v| (v * 64.0).round() / 64.0);
        let q = prepare_points(pts.view(), res).unwrap();
        let plan = Plan::new(q.tensor.clone(), &cfg, ModelKind::Unet).unwrap();
        let base = predict_inliers(&mut net, &plan, &q.provenance).unwrap();
        // Shift by a multiple of the coarsest stride (4 cells).
        let shift = array![4.0 * 3.0 * res, -4.0 * 2.0 * res];
        let moved = &pts + &shift;
        let q2 = prepare_points(moved.view(), res).unwrap();
        let plan2 = Plan::new(q2.tensor.clone(), &cfg, ModelKind::Unet).unwrap();
        let shifted = predict_inliers(&mut net, &plan2, &q2.provenance).unwrap();
        for (a, b) in base.probability.iter().zip(&shifted.probability) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn unet_prediction_depends_on_coordinates_not_row_order() {
        let cfg = tiny(3, 2);
        let mut net = build_unet(&cfg, &mut rng_from_seed(6)).unwrap();
        let pts = random_points(7, 50, 3, 2.0);
        let q = prepare_points(pts.view(), 0.25).unwrap();
        let plan = Plan::new(q.tensor.clone(), &cfg, ModelKind::Unet).unwrap();
        let base = predict_inliers(&mut net, &plan, &q.provenance).unwrap();
        let perm: Vec<usize> = (0..50).rev().collect();
        let shuffled = pts.select(Axis(0), &perm);
        let q2 = prepare_points(shuffled.view(), 0.25).unwrap();
        let plan2 = Plan::new(q2.tensor.clone(), &cfg, ModelKind::Unet).unwrap();
        let other = predict_inliers(&mut net, &plan2, &q2.provenance).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((other.probability[k] - base.probability[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn mlp_is_permutation_equivariant() {
        let cfg = tiny(2, 2);
        let mut net = build_mlp_baseline(&cfg, &mut rng_from_seed(8)).unwrap();
        let feats = random_points(9, 20, 3, 1.0);
        let map = CoordinateMap::from_rows(2, (0..20).map(|i| vec![i, 0]).collect::<Vec<_>>().iter().map(Vec::as_slice)).unwrap();
        let t = SparseTensor::new(Arc::new(map), feats.clone(), vec![1, 1]).unwrap();
        let plan = Plan::new(t, &cfg, ModelKind::Mlp).unwrap();
        let base = net.logits(&plan).unwrap();
        let perm: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
        let map2 = CoordinateMap::from_rows(2, (0..20).map(|i| vec![i, 0]).collect::<Vec<_>>().iter().map(Vec::as_slice)).unwrap();
        let t2 = SparseTensor::new(Arc::new(map2), feats.select(Axis(0), &perm), vec![1, 1]).unwrap();
        let plan2 = Plan::new(t2, &cfg, ModelKind::Mlp).unwrap();
        let other = net.logits(&plan2).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((other[k] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_single_row_is_finite() {
        let cfg = tiny(2, 2);
        let mut net = build_mlp_baseline(&cfg, &mut rng_from_seed(8)).unwrap();
        let map = CoordinateMap::from_rows(2, [&[0, 0][..]]).unwrap();
        let t = SparseTensor::new(Arc::new(map), array![[0.3, -0.2, 1.0]], vec![1, 1]).unwrap();
        let plan = Plan::new(t, &cfg, ModelKind::Mlp).unwrap();
        let mut tape = Tape::new();
        assert!(net.forward(&mut tape, &plan, true).is_ok());
        assert!(net.logits(&plan).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predictions_threshold_inclusive_and_shared_cells() {
        let p = predictions_from_logits(&array![0.0, -10.0], &[0, 1, 0]).unwrap();
        assert_eq!(p.probability[0], 0.5);
        assert_eq!(p.inlier, vec![true, false, true]);
        assert_eq!(p.probability[0], p.probability[2]);
        assert!(predictions_from_logits(&array![0.0], &[1]).is_err());
    }

    #[test]
    fn cell_labels_majority() {
        let l = cell_labels(&[true, false, false, true, true], &[0, 0, 1, 2, 2], 3).unwrap();
        assert_eq!(l, vec![true, false, true]);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let cfg = tiny(2, 2);
        let mut net = build_unet(&cfg, &mut rng_from_seed(10)).unwrap();
        let q = prepare_points(random_points(11, 30, 2, 2.0).view(), 0.25).unwrap();
        let plan = Plan::new(q.tensor.clone(), &cfg, ModelKind::Unet).unwrap();
        let mut tape = Tape::new();
        net.forward(&mut tape, &plan, true).unwrap(); // moves running stats
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        let mut back = Network::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.logits(&plan).unwrap(), net.logits(&plan).unwrap());
    }

    fn whole_network_gradcheck(kind: ModelKind) {
        let cfg = NetworkConfig { channels: vec![3, 4], ..tiny(2, 2) };
        let mut net = build_network(kind, &cfg, &mut rng_from_seed(12)).unwrap();
        let q = prepare_points(random_points(13, 30, 2, 2.0).view(), 0.25).unwrap();
        let plan = Plan::new(q.tensor.clone(), &cfg, kind).unwrap();
        let labels: Vec<bool> = (0..plan.rows()).map(|i| i % 3 == 0).collect();
        let loss_of = |net: &mut Network| -> f64 {
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &plan, true).unwrap();
            let l = tape.balanced_cross_entropy(out, &labels).unwrap();
            tape.value(l)[[0, 0]]
        };
        net.params_mut().zero_grad();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &plan, true).unwrap();
        let l = tape.balanced_cross_entropy(out, &labels).unwrap();
        let mut store = net.params().clone();
        tape.backward(l, &mut store).unwrap();
        for id in store.ids() {
            let analytic = store.grad(id).clone();
            let x0 = net.params().value(id).clone();
            let numeric = numerical_gradient(&x0, 1e-5, |p| {
                *net.params_mut().value_mut(id) = p.clone();
                loss_of(&mut net)
            });
            *net.params_mut().value_mut(id) = x0;
            let err = relative_error(analytic.view(), numeric.view());
            let scale = analytic.iter().chain(numeric.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-4 || scale < 1e-9, "{}: {err}", store.name(id));
        }
    }

    #[test]
    fn unet_whole_network_gradient() {
        whole_network_gradcheck(ModelKind::Unet);
    }

    #[test]
    fn mlp_whole_network_gradient() {
        whole_network_gradcheck(ModelKind::Mlp);
    }
}
