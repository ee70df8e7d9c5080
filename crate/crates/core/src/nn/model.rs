use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use super::kernels::{col2im, gemm, im2col, ConvGeometry};
use crate::arch::{ArchSpec, LayerDecl, LayerKind};
use crate::error::{Error, Result};
use crate::sparsity::MaskSet;
use crate::tensor::Tensor;

/// One node of a runnable model: its declaration plus parameters.
#[derive(Debug, Clone)]
pub struct Layer {
    pub decl: LayerDecl,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Patch matrices for every sample, `[B, K, P]`.
    Cols(Vec<f64>),
    /// Flat input offset of the selected element for each output.
    ArgMax(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Cache {
    batch: usize,
    batched: bool,
    input: Vec<f64>,
    outputs: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

/// A trainable network built from an [`ArchSpec`].
#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchSpec,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    maskable: Vec<usize>,
    cache: Option<Cache>,
}

impl Model {
    /// He-normal (fan-in) weights, zero biases.
    pub fn new(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.infer_shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut maskable = Vec::new();
        for (i, decl) in spec.layers.iter().enumerate() {
            let (weight, bias) = match decl.kind.weight_shape() {
                Some(shape) => {
                    maskable.push(i);
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::config(i, e.to_string()))?;
                    let n: usize = shape.iter().product();
                    let values = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    let weight = Tensor::from_vec(&shape, values)?;
                    let bias = decl.kind.has_bias().then(|| Tensor::zeros(&[shape[0]]));
                    (Some(weight), bias)
                }
                None => (None, None),
            };
            layers.push(Layer {
                decl: decl.clone(),
                weight,
                bias,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            shapes,
            maskable,
            cache: None,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of conv/linear layers.
    pub fn maskable_count(&self) -> usize {
        self.maskable.len()
    }

    pub fn maskable_name(&self, l: usize) -> &str {
        &self.layers[self.maskable[l]].decl.name
    }

    pub fn weight(&self, l: usize) -> &Tensor {
        self.layers[self.maskable[l]].weight.as_ref().expect("maskable layer has weight")
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut Tensor {
        self.layers[self.maskable[l]].weight.as_mut().expect("maskable layer has weight")
    }

    pub fn bias(&self, l: usize) -> Option<&Tensor> {
        self.layers[self.maskable[l]].bias.as_ref()
    }

    pub fn bias_mut(&mut self, l: usize) -> Option<&mut Tensor> {
        self.layers[self.maskable[l]].bias.as_mut()
    }

    pub fn weights_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().filter_map(|l| l.weight.as_mut())
    }

    /// Sum over maskable layers of their weight count.
    pub fn maskable_weight_count(&self) -> usize {
        (0..self.maskable_count()).map(|l| self.weight(l).len()).sum()
    }

    pub fn apply_masks(&mut self, masks: &MaskSet) -> Result<()> {
        crate::sparsity::apply_mask(masks, self.weights_mut())
    }

    pub fn weight_norms(&self) -> Vec<(String, f64)> {
        (0..self.maskable_count())
            .map(|l| (self.maskable_name(l).to_string(), self.weight(l).l2_norm()))
            .collect()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Runs the network, caching activations for [`Model::backward`].
    ///
    /// Accepts a single example shaped like the architecture input, or a batch
    /// `[B, ...]` whose trailing dimensions hold one example each.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let in_shape = &self.spec.input_shape;
        let per_example = self.spec.input_len();
        let (batch, batched) = if input.shape() == in_shape.as_slice() {
            (1, false)
        } else {
            let shape = input.shape();
            let trailing_ok = shape.len() >= 2
                && (shape[1..] == in_shape[..] || shape[1..].iter().product::<usize>() == per_example);
            if !trailing_ok {
                return Err(Error::config(
                    0,
                    format!("input shape {shape:?} does not match architecture input {in_shape:?}"),
                ));
            }
            (shape[0], true)
        };

        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let src = self.input_node(i);
            let x: &[f64] = match src {
                Some(j) => &outputs[j],
                None => input.values(),
            };
            let in_shape: &[usize] = match src {
                Some(j) => &self.shapes[j],
                None => &self.spec.input_shape,
            };
            let (out, a) = self.forward_node(i, x, in_shape, batch, &outputs)?;
            outputs.push(out);
            aux.push(a);
        }
        let logits = outputs.last().expect("non-empty").clone();
        self.cache = Some(Cache {
            batch,
            batched,
            input: input.values().to_vec(),
            outputs,
            aux,
        });
        let classes = self.spec.class_count;
        if batched {
            Tensor::from_vec(&[batch, classes], logits)
        } else {
            Tensor::from_vec(&[classes], logits)
        }
    }

    fn input_node(&self, i: usize) -> Option<usize> {
        match self.layers[i].decl.from {
            Some(j) => Some(j),
            None if i == 0 => None,
            None => Some(i - 1),
        }
    }

    fn forward_node(
        &self,
        i: usize,
        x: &[f64],
        in_shape: &[usize],
        batch: usize,
        outputs: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Aux)> {
        let layer = &self.layers[i];
        let out_shape = &self.shapes[i];
        let out_len: usize = out_shape.iter().product();
        let in_len: usize = in_shape.iter().product();
        match layer.decl.kind {
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => {
                let w = layer.weight.as_ref().expect("linear weight");
                let mut y = vec![0.0; batch * out_features];
                if let Some(b) = &layer.bias {
                    for row in y.chunks_mut(out_features) {
                        row.copy_from_slice(b.values());
                    }
                }
                gemm(batch, in_features, out_features, x, false, w.values(), true, &mut y, true);
                Ok((y, Aux::None))
            }
            LayerKind::Conv2d { .. } => {
                let g = self.conv_geometry(i, in_shape);
                let (k, p) = (g.patch_len(), g.positions());
                let w = layer.weight.as_ref().expect("conv weight");
                let cout = out_shape[0];
                let mut cols = vec![0.0; batch * k * p];
                let mut y = vec![0.0; batch * out_len];
                for b in 0..batch {
                    let col = &mut cols[b * k * p..(b + 1) * k * p];
                    im2col(&g, &x[b * in_len..(b + 1) * in_len], col);
                    let yb = &mut y[b * out_len..(b + 1) * out_len];
                    if let Some(bias) = &layer.bias {
                        for (row, &bv) in yb.chunks_mut(p).zip(bias.values()) {
                            row.fill(bv);
                        }
                    }
                    gemm(cout, k, p, w.values(), false, col, false, yb, true);
                }
                Ok((y, Aux::Cols(cols)))
            }
            LayerKind::Relu => Ok((x.iter().map(|&v| v.max(0.0)).collect(), Aux::None)),
            LayerKind::MaxPool2d { kernel, stride } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut y = vec![0.0; batch * out_len];
                let mut arg = vec![0; batch * out_len];
                for b in 0..batch {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_at = 0;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let at = b * in_len
                                            + (ch * h + oy * stride + ky) * w
                                            + ox * stride
                                            + kx;
                                        if x[at] > best {
                                            best = x[at];
                                            best_at = at;
                                        }
                                    }
                                }
                                let o = b * out_len + (ch * oh + oy) * ow + ox;
                                y[o] = best;
                                arg[o] = best_at;
                            }
                        }
                    }
                }
                Ok((y, Aux::ArgMax(arg)))
            }
            LayerKind::AvgPool2d { kernel, stride } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let scale = 1.0 / (kernel * kernel) as f64;
                let mut y = vec![0.0; batch * out_len];
                for b in 0..batch {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut sum = 0.0;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        sum += x[b * in_len
                                            + (ch * h + oy * stride + ky) * w
                                            + ox * stride
                                            + kx];
                                    }
                                }
                                y[b * out_len + (ch * oh + oy) * ow + ox] = sum * scale;
                            }
                        }
                    }
                }
                Ok((y, Aux::None))
            }
            LayerKind::Flatten | LayerKind::Norm { .. } => Ok((x.to_vec(), Aux::None)),
            LayerKind::Add { skip } => {
                let y = x.iter().zip(&outputs[skip]).map(|(a, b)| a + b).collect();
                Ok((y, Aux::None))
            }
        }
    }

    fn conv_geometry(&self, i: usize, in_shape: &[usize]) -> ConvGeometry {
        let LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            stride,
            padding,
            ..
        } = self.layers[i].decl.kind
        else {
            unreachable!("conv geometry of a non-conv layer");
        };
        ConvGeometry {
            channels: in_shape[0],
            height: in_shape[1],
            width: in_shape[2],
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: self.shapes[i][1],
            out_w: self.shapes[i][2],
        }
    }

    /// Back-propagates `logits_grad` through the cached forward pass.
    ///
    /// Weight gradients are dense: masked-out positions (which hold zero) get
    /// the true derivative of the loss at zero. Returns the input gradient.
    pub fn backward(&mut self, logits_grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let result = self.backward_cached(&cache, logits_grad);
        self.cache = Some(cache);
        result
    }

    fn backward_cached(&mut self, cache: &Cache, logits_grad: &Tensor) -> Result<Tensor> {
        let batch = cache.batch;
        let expect = batch * self.spec.class_count;
        if logits_grad.len() != expect {
            return Err(Error::Shape {
                expected: vec![batch, self.spec.class_count],
                actual: logits_grad.shape().to_vec(),
            });
        }
        let n = self.layers.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[n - 1] = Some(logits_grad.values().to_vec());
        let mut input_grad = vec![0.0; cache.input.len()];

        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else {
                self.zero_param_grads(i);
                continue;
            };
            let src = self.input_node(i);
            let in_shape: Vec<usize> = match src {
                Some(j) => self.shapes[j].clone(),
                None => self.spec.input_shape.clone(),
            };
            let x: &[f64] = match src {
                Some(j) => &cache.outputs[j],
                None => &cache.input,
            };
            let in_len: usize = in_shape.iter().product();
            let out_shape = self.shapes[i].clone();
            let out_len: usize = out_shape.iter().product();
            let mut gx = vec![0.0; batch * in_len];

            match self.layers[i].decl.kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    let layer = &mut self.layers[i];
                    let w = layer.weight.as_mut().expect("linear weight");
                    let mut gw = vec![0.0; w.len()];
                    gemm(out_features, batch, in_features, &gy, true, x, false, &mut gw, false);
                    gemm(batch, out_features, in_features, &gy, false, w.values(), false, &mut gx, false);
                    w.set_grad(gw)?;
                    if let Some(b) = layer.bias.as_mut() {
                        let mut gb = vec![0.0; out_features];
                        for row in gy.chunks(out_features) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        b.set_grad(gb)?;
                    }
                }
                LayerKind::Conv2d { .. } => {
                    let g = self.conv_geometry(i, &in_shape);
                    let (k, p) = (g.patch_len(), g.positions());
                    let cout = out_shape[0];
                    let Aux::Cols(cols) = &cache.aux[i] else {
                        return Err(Error::State(format!("missing patch cache for layer {i}")));
                    };
                    let layer = &mut self.layers[i];
                    let w = layer.weight.as_mut().expect("conv weight");
                    let mut gw = vec![0.0; w.len()];
                    let mut gcols = vec![0.0; k * p];
                    let mut gb = layer.bias.as_ref().map(|_| vec![0.0; cout]);
                    for b in 0..batch {
                        let gyb = &gy[b * out_len..(b + 1) * out_len];
                        let col = &cols[b * k * p..(b + 1) * k * p];
                        gemm(cout, p, k, gyb, false, col, true, &mut gw, true);
                        gemm(k, cout, p, w.values(), true, gyb, false, &mut gcols, false);
                        col2im(&g, &gcols, &mut gx[b * in_len..(b + 1) * in_len]);
                        if let Some(gb) = gb.as_mut() {
                            for (acc, row) in gb.iter_mut().zip(gyb.chunks(p)) {
                                *acc += row.iter().sum::<f64>();
                            }
                        }
                    }
                    w.set_grad(gw)?;
                    if let (Some(b), Some(gb)) = (layer.bias.as_mut(), gb) {
                        b.set_grad(gb)?;
                    }
                }
                LayerKind::Relu => {
                    let y = &cache.outputs[i];
                    for ((d, &g), &v) in gx.iter_mut().zip(&gy).zip(y) {
                        *d = if v > 0.0 { g } else { 0.0 };
                    }
                }
                LayerKind::MaxPool2d { .. } => {
                    let Aux::ArgMax(arg) = &cache.aux[i] else {
                        return Err(Error::State(format!("missing pooling cache for layer {i}")));
                    };
                    for (&at, &g) in arg.iter().zip(&gy) {
                        gx[at] += g;
                    }
                }
                LayerKind::AvgPool2d { kernel, stride } => {
                    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                    let (oh, ow) = (out_shape[1], out_shape[2]);
                    let scale = 1.0 / (kernel * kernel) as f64;
                    for b in 0..batch {
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = gy[b * out_len + (ch * oh + oy) * ow + ox] * scale;
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            gx[b * in_len
                                                + (ch * h + oy * stride + ky) * w
                                                + ox * stride
                                                + kx] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                LayerKind::Flatten | LayerKind::Norm { .. } => gx.copy_from_slice(&gy),
                LayerKind::Add { skip } => {
                    gx.copy_from_slice(&gy);
                    accumulate(&mut grads[skip], &gy);
                }
            }

            match src {
                Some(j) => accumulate(&mut grads[j], &gx),
                None => {
                    for (a, v) in input_grad.iter_mut().zip(&gx) {
                        *a += v;
                    }
                }
            }
        }
        let shape = if cache.batched {
            let mut s = vec![batch];
            s.extend_from_slice(&self.spec.input_shape);
            s
        } else {
            self.spec.input_shape.clone()
        };
        Tensor::from_vec(&shape, input_grad)
    }

    fn zero_param_grads(&mut self, i: usize) {
        let layer = &mut self.layers[i];
        for t in [layer.weight.as_mut(), layer.bias.as_mut()].into_iter().flatten() {
            let n = t.len();
            t.set_grad(vec![0.0; n]).expect("length matches");
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}
