//! EfficientNet-style image classifier built from MBConv stages.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::scaling::{make_divisible, scale_repeats, ScaledDims};
use super::{Classifier, ForwardCtx};
use crate::autodiff::{ConvGeom, Graph, Padding, Var};
use crate::error::{invalid, shape_err, Result};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Conv,
    Mbconv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub op: OpKind,
    pub kernel: usize,
    pub base_channels: usize,
    pub repeats: usize,
    pub stride: usize,
    #[serde(default = "one")]
    pub expansion: usize,
    #[serde(default)]
    pub se_ratio: f64,
}

fn one() -> usize {
    1
}

impl StageSpec {
    pub fn conv(kernel: usize, channels: usize, stride: usize) -> Self {
        Self { op: OpKind::Conv, kernel, base_channels: channels, repeats: 1, stride, expansion: 1, se_ratio: 0.0 }
    }

    pub fn mbconv(kernel: usize, channels: usize, repeats: usize, stride: usize, expansion: usize, se_ratio: f64) -> Self {
        Self { op: OpKind::Mbconv, kernel, base_channels: channels, repeats, stride, expansion, se_ratio }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.expansion == 0 || self.kernel == 0 || self.base_channels == 0 {
            return invalid(format!("stage {self:?}: repeats, expansion, kernel and channels must be >= 1"));
        }
        if !matches!(self.stride, 1 | 2) {
            return invalid(format!("stage stride {} not in {{1, 2}}", self.stride));
        }
        if !(0.0..=1.0).contains(&self.se_ratio) {
            return invalid(format!("se_ratio {} outside [0, 1]", self.se_ratio));
        }
        Ok(())
    }

    /// Stem plus the seven MBConv stages of B0.
    pub fn b0_table() -> Vec<StageSpec> {
        let m = StageSpec::mbconv;
        vec![
            StageSpec::conv(3, 32, 2),
            m(3, 16, 1, 1, 1, 0.25),
            m(3, 24, 2, 2, 6, 0.25),
            m(5, 40, 2, 2, 6, 0.25),
            m(3, 80, 3, 2, 6, 0.25),
            m(5, 112, 3, 1, 6, 0.25),
            m(5, 192, 4, 2, 6, 0.25),
            m(3, 320, 1, 1, 6, 0.25),
        ]
    }

    /// Stem 8 and two MBConv stages of 8 and 16 channels.
    pub fn micro_table() -> Vec<StageSpec> {
        vec![
            StageSpec::conv(3, 8, 2),
            StageSpec::mbconv(3, 8, 1, 1, 1, 0.25),
            StageSpec::mbconv(3, 16, 1, 2, 6, 0.25),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageModelSpec {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Base width of the 1x1 conv before pooling (scaled by `w`).
    pub head_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    pub dims: ScaledDims,
}

impl ImageModelSpec {
    pub fn b0(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            stages: StageSpec::b0_table(),
            head_channels: 1280,
            num_classes,
            dropout: 0.2,
            dims: ScaledDims::explicit(1.0, 1.0, 224),
        }
    }

    pub fn micro(num_classes: usize, input_size: usize) -> Self {
        Self {
            in_channels: 1,
            stages: StageSpec::micro_table(),
            head_channels: 64,
            num_classes,
            dropout: 0.0,
            dims: ScaledDims::explicit(1.0, 1.0, input_size),
        }
    }
}

/// Normalization used after every conv: zero mean, unit variance over each
/// sample's `(c, h, w)` volume, then a learned per-channel scale and shift.
#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct ConvNorm {
    w: ParamId,
    norm: Norm,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Se {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// One mobile inverted bottleneck block.
#[derive(Debug, Clone)]
pub struct MbConv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expanded: usize,
    pub kernel: usize,
    pub stride: usize,
    expand: Option<ConvNorm>,
    depthwise: ConvNorm,
    se: Option<Se>,
    project: ConvNorm,
}

impl MbConv {
    pub fn has_expand(&self) -> bool {
        self.expand.is_some()
    }

    pub fn has_se(&self) -> bool {
        self.se.is_some()
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(ConvNorm),
    MbConv(MbConv),
    Head { conv: ConvNorm, fc_w: ParamId, fc_b: ParamId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    /// `(channels, height, width)` produced at the spec's input size.
    pub out: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ImageModel<T> {
    pub spec: ImageModelSpec,
    store: ParamStore<T>,
    layers: Vec<Layer>,
    info: Vec<LayerInfo>,
}

fn kaiming<T: Scalar>(shape: &[usize], fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_out as f64).sqrt(), rng).unwrap()
}

fn add_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, group: &str, ch: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{prefix}.gamma"), group, Tensor::ones(&[ch]).unwrap()),
        beta: store.add(format!("{prefix}.beta"), group, Tensor::zeros(&[ch]).unwrap()),
    }
}

fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    group: &str,
    (cin, cout, k, stride): (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> ConvNorm {
    let w = store.add(format!("{prefix}.weight"), group, kaiming(&[cout, cin, k, k], cout * k * k, rng));
    ConvNorm { w, norm: add_norm(store, &format!("{prefix}.norm"), group, cout), stride }
}

/// Adds the parameters of one MBConv block to `store`.
#[allow(clippy::too_many_arguments)]
pub fn build_mbconv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    group: &str,
    in_ch: usize,
    out_ch: usize,
    expansion: usize,
    kernel: usize,
    stride: usize,
    se_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MbConv> {
    if in_ch == 0 || out_ch == 0 || expansion == 0 || kernel == 0 {
        return shape_err("MBConv channels, expansion and kernel must be positive");
    }
    let expanded = in_ch * expansion;
    let expand = (expansion != 1).then(|| add_conv(store, &format!("{prefix}.expand"), group, (in_ch, expanded, 1, 1), rng));
    let dw_w = store.add(
        format!("{prefix}.depthwise.weight"),
        group,
        kaiming(&[expanded, 1, kernel, kernel], kernel * kernel, rng),
    );
    let depthwise = ConvNorm { w: dw_w, norm: add_norm(store, &format!("{prefix}.depthwise.norm"), group, expanded), stride };
    let se = (se_ratio > 0.0).then(|| {
        let sq = ((in_ch as f64 * se_ratio) as usize).max(1);
        Se {
            w1: store.add(format!("{prefix}.se.reduce.weight"), group, kaiming(&[sq, expanded, 1, 1], sq, rng)),
            b1: store.add(format!("{prefix}.se.reduce.bias"), group, Tensor::zeros(&[sq]).unwrap()),
            w2: store.add(format!("{prefix}.se.expand.weight"), group, kaiming(&[expanded, sq, 1, 1], expanded, rng)),
            b2: store.add(format!("{prefix}.se.expand.bias"), group, Tensor::zeros(&[expanded]).unwrap()),
        }
    });
    let project = add_conv(store, &format!("{prefix}.project"), group, (expanded, out_ch, 1, 1), rng);
    Ok(MbConv { in_ch, out_ch, expanded, kernel, stride, expand, depthwise, se, project })
}

/// Builds the scaled network described by `spec`, initialized from `seed`.
pub fn build_efficientnet<T: Scalar>(spec: &ImageModelSpec, seed: u64) -> Result<ImageModel<T>> {
    if spec.stages.is_empty() {
        return invalid("empty stage list");
    }
    if spec.num_classes == 0 || spec.in_channels == 0 || spec.head_channels == 0 {
        return invalid("classes, input channels and head channels must be positive");
    }
    if !(0.0..1.0).contains(&spec.dropout) {
        return invalid(format!("dropout {} outside [0, 1)", spec.dropout));
    }
    let w = spec.dims.width_mult;
    let d = spec.dims.depth_mult;
    let mut rng = rng_for(seed, &[0x1A6E]);
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut info = Vec::new();
    let (mut ch, mut h, mut wd) = (spec.in_channels, spec.dims.input_size, spec.dims.input_size);
    let advance = |k: usize, s: usize, h: &mut usize, wd: &mut usize| -> Result<()> {
        let g = ConvGeom::new(*h, *wd, k, s, Padding::Same)?;
        (*h, *wd) = (g.out_h, g.out_w);
        Ok(())
    };

    for (si, st) in spec.stages.iter().enumerate() {
        st.validate()?;
        let out_ch = make_divisible(st.base_channels as f64 * w, 8);
        match st.op {
            // Plain conv stages are not depth-scaled; a leading one is the stem.
            OpKind::Conv => {
                let (group, name) = if si == 0 { ("stem", "stem".to_string()) } else { ("stages", format!("stages.{si}")) };
                let cn = add_conv(&mut store, &name, group, (ch, out_ch, st.kernel, st.stride), &mut rng);
                advance(st.kernel, st.stride, &mut h, &mut wd)?;
                ch = out_ch;
                layers.push(Layer::Conv(cn));
                info.push(LayerInfo { name, out: (ch, h, wd) });
            }
            OpKind::Mbconv => {
                for r in 0..scale_repeats(st.repeats, d) {
                    let stride = if r == 0 { st.stride } else { 1 };
                    let name = format!("stages.{si}.{r}");
                    let block = build_mbconv(&mut store, &name, "stages", ch, out_ch, st.expansion, st.kernel, stride, st.se_ratio, &mut rng)?;
                    advance(st.kernel, stride, &mut h, &mut wd)?;
                    ch = out_ch;
                    layers.push(Layer::MbConv(block));
                    info.push(LayerInfo { name, out: (ch, h, wd) });
                }
            }
        }
    }

    let head_ch = make_divisible(spec.head_channels as f64 * w, 8);
    let conv = add_conv(&mut store, "top.conv", "top", (ch, head_ch, 1, 1), &mut rng);
    info.push(LayerInfo { name: "top".into(), out: (head_ch, h, wd) });
    let bound = 1.0 / (spec.num_classes as f64).sqrt();
    let fc_w = store.add("head.fc.weight", "head", Tensor::uniform(&[head_ch, spec.num_classes], -bound, bound, &mut rng)?);
    let fc_b = store.add("head.fc.bias", "head", Tensor::zeros(&[spec.num_classes])?);
    info.push(LayerInfo { name: "head".into(), out: (spec.num_classes, 1, 1) });
    layers.push(Layer::Head { conv, fc_w, fc_b });

    Ok(ImageModel { spec: spec.clone(), store, layers, info })
}

impl<T: Scalar> ImageModel<T> {
    pub fn layer_info(&self) -> &[LayerInfo] {
        &self.info
    }

    pub fn blocks(&self) -> impl Iterator<Item = &MbConv> {
        self.layers.iter().filter_map(|l| match l {
            Layer::MbConv(b) => Some(b),
            _ => None,
        })
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    pub fn from_parts(spec: ImageModelSpec, store: ParamStore<T>, seed: u64) -> Result<Self> {
        let mut m = build_efficientnet::<T>(&spec, seed)?;
        if m.store.len() != store.len() {
            return shape_err("parameter list does not match the model spec");
        }
        for (a, b) in m.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return shape_err(format!("parameter `{}` {:?} does not match `{}` {:?}", b.name, b.value.shape(), a.name, a.value.shape()));
            }
        }
        m.store = store;
        Ok(m)
    }
}

fn norm<T: Scalar>(g: &mut Graph<T>, p: &[Var], x: Var, n: Norm) -> Result<Var> {
    let ch = g.shape(x)[1];
    let y = g.normalize_from(x, 1, NORM_EPS)?;
    let gamma = g.reshape(p[n.gamma.index()], &[ch, 1, 1])?;
    let beta = g.reshape(p[n.beta.index()], &[ch, 1, 1])?;
    let y = g.mul(y, gamma)?;
    g.add(y, beta)
}

fn conv_norm<T: Scalar>(g: &mut Graph<T>, p: &[Var], x: Var, cn: &ConvNorm, act: bool) -> Result<Var> {
    let y = g.conv2d(x, p[cn.w.index()], None, cn.stride, Padding::Same)?;
    let y = norm(g, p, y, cn.norm)?;
    Ok(if act { g.swish(y) } else { y })
}

fn mbconv_forward<T: Scalar>(g: &mut Graph<T>, p: &[Var], x: Var, b: &MbConv) -> Result<Var> {
    let mut h = x;
    if let Some(e) = &b.expand {
        h = conv_norm(g, p, h, e, true)?;
    }
    h = g.depthwise_conv2d(h, p[b.depthwise.w.index()], None, b.stride, Padding::Same)?;
    h = norm(g, p, h, b.depthwise.norm)?;
    h = g.swish(h);
    if let Some(se) = &b.se {
        let s = g.global_avg_pool(h)?;
        let s = g.conv2d(s, p[se.w1.index()], Some(p[se.b1.index()]), 1, Padding::Valid)?;
        let s = g.swish(s);
        let s = g.conv2d(s, p[se.w2.index()], Some(p[se.b2.index()]), 1, Padding::Valid)?;
        let s = g.sigmoid(s);
        h = g.mul(h, s)?;
    }
    h = conv_norm(g, p, h, &b.project, false)?;
    if b.has_residual() {
        h = g.add(h, x)?;
    }
    Ok(h)
}

/// Stacks `[c, h, w]` images into one `[n, c, h, w]` tensor.
pub fn stack_images<T: Scalar>(batch: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = batch.first().ok_or_else(|| crate::Error::Shape("empty image batch".into()))?;
    if first.rank() != 3 {
        return shape_err(format!("image must be [c, h, w], got {:?}", first.shape()));
    }
    let mut data = Vec::with_capacity(first.numel() * batch.len());
    for t in batch {
        if t.shape() != first.shape() {
            return shape_err(format!("image {:?} differs from {:?}", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let s = first.shape();
    Tensor::new(&[batch.len(), s[0], s[1], s[2]], data)
}

impl<T: Scalar> Classifier<T> for ImageModel<T> {
    type Input = Tensor<T>;

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn logits(&self, g: &mut Graph<T>, p: &[Var], batch: &[&Tensor<T>], ctx: &ForwardCtx) -> Result<Var> {
        let x = stack_images(batch)?;
        if x.shape()[1] != self.spec.in_channels {
            return shape_err(format!("expected {} input channels, got {}", self.spec.in_channels, x.shape()[1]));
        }
        let mut h = g.input(x);
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(cn) => conv_norm(g, p, h, cn, true)?,
                Layer::MbConv(b) => mbconv_forward(g, p, h, b)?,
                Layer::Head { conv, fc_w, fc_b } => {
                    let y = conv_norm(g, p, h, conv, true)?;
                    let y = g.global_avg_pool(y)?;
                    let ch = g.shape(y)[1];
                    let y = g.reshape(y, &[batch.len(), ch])?;
                    let rate = ctx.dropout_rate(self.spec.dropout);
                    let y = if rate > 0.0 { g.dropout(y, rate, &ctx.row_seeds(1, 1))? } else { y };
                    g.linear(y, p[fc_w.index()], Some(p[fc_b.index()]))?
                }
            };
        }
        Ok(h)
    }
}

/// Per-row sample generator for a random input batch of the right shape.
pub fn random_images<T: Scalar>(spec: &ImageModelSpec, n: usize, rng: &mut impl Rng) -> Vec<Tensor<T>> {
    let s = spec.dims.input_size;
    (0..n).map(|_| Tensor::uniform(&[spec.in_channels, s, s], 0.0, 1.0, rng).unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::predict_proba;
    use rand::SeedableRng;

    /// Element count of one MBConv block computed by hand.
    fn mbconv_oracle(cin: usize, cout: usize, e: usize, k: usize, se: f64) -> usize {
        let x = cin * e;
        let expand = if e == 1 { 0 } else { cin * x + 2 * x };
        let dw = x * k * k + 2 * x;
        let sq = ((cin as f64 * se) as usize).max(1);
        let se = if se > 0.0 { x * sq + sq + sq * x + x } else { 0 };
        expand + dw + se + x * cout + 2 * cout
    }

    #[test]
    fn mbconv_structure() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_mbconv(&mut s, "b", "g", 16, 24, 6, 3, 1, 0.25, &mut rng).unwrap();
        assert_eq!(b.expanded, 96);
        assert!(b.has_expand() && b.has_se() && !b.has_residual());
        assert_eq!(s.count(), mbconv_oracle(16, 24, 6, 3, 0.25));

        let mut s = ParamStore::<f64>::new();
        let b = build_mbconv(&mut s, "b", "g", 24, 24, 6, 3, 1, 0.25, &mut rng).unwrap();
        assert!(b.has_residual());
        let b = build_mbconv(&mut s, "c", "g", 24, 24, 6, 3, 2, 0.25, &mut rng).unwrap();
        assert!(!b.has_residual());
        let b = build_mbconv(&mut s, "d", "g", 32, 16, 1, 3, 1, 0.0, &mut rng).unwrap();
        assert!(!b.has_expand() && !b.has_se());
    }

    #[test]
    fn b0_count_matches_oracle_and_table() {
        let spec = ImageModelSpec::b0(1000);
        let m = build_efficientnet::<f32>(&spec, 0).unwrap();
        // Independent tally over the B0 table.
        let mut total = 3 * 32 * 9 + 64;
        let mut cin = 32;
        for st in &spec.stages[1..] {
            for r in 0..st.repeats {
                let _ = r;
                total += mbconv_oracle(cin, st.base_channels, st.expansion, st.kernel, st.se_ratio);
                cin = st.base_channels;
            }
        }
        total += 320 * 1280 + 2 * 1280 + 1280 * 1000 + 1000;
        assert_eq!(m.count_params(), total);
        assert_eq!(total, 5_288_548);
        assert_eq!(m.layer_info().last().unwrap().out, (1000, 1, 1));
        assert_eq!(m.layer_info()[m.layer_info().len() - 2].out, (1280, 7, 7));
    }

    #[test]
    fn b2_preset_count() {
        let mut spec = ImageModelSpec::b0(1000);
        spec.dims = ScaledDims::preset("b2").unwrap();
        let n = build_efficientnet::<f32>(&spec, 0).unwrap().count_params();
        assert!((9_000_000..9_200_000).contains(&n), "{n}");
    }

    #[test]
    fn every_param_in_one_known_group() {
        let m = build_efficientnet::<f32>(&ImageModelSpec::micro(4, 32), 0).unwrap();
        assert_eq!(m.params().groups(), vec!["stem", "stages", "top", "head"]);
        let total: usize = m.params().groups().iter().map(|g| m.params().count_group(g)).sum();
        assert_eq!(total, m.count_params());
    }

    #[test]
    fn micro_forward_rows_sum_to_one() {
        let spec = ImageModelSpec::micro(4, 32);
        let m = build_efficientnet::<f64>(&spec, 3).unwrap();
        let imgs = random_images::<f64>(&spec, 5, &mut ChaCha8Rng::seed_from_u64(1));
        let refs: Vec<_> = imgs.iter().collect();
        let p = predict_proba(&m, &refs, 8).unwrap();
        assert_eq!((p.len(), p[0].len()), (5, 4));
        for row in p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn doubling_width_roughly_quadruples_stage_params() {
        let mut a = ImageModelSpec::b0(10);
        a.dims = ScaledDims::explicit(1.0, 1.0, 64);
        let mut b = a.clone();
        b.dims = ScaledDims::explicit(2.0, 1.0, 64);
        let ma = build_efficientnet::<f32>(&a, 0).unwrap();
        let mb = build_efficientnet::<f32>(&b, 0).unwrap();
        let ratio = mb.params().count_group("stages") as f64 / ma.params().count_group("stages") as f64;
        assert!((3.6..4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn builder_rejects_bad_specs() {
        let mut s = ImageModelSpec::micro(4, 32);
        s.stages.clear();
        assert!(build_efficientnet::<f32>(&s, 0).is_err());
        let mut s = ImageModelSpec::micro(4, 32);
        s.stages[1].stride = 3;
        assert!(build_efficientnet::<f32>(&s, 0).is_err());
    }
}
