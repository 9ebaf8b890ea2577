//! Float and quantized networks stored in the "ETCN" container.

use std::collections::BTreeSet;
use std::path::Path;

use crate::container::{Container, TensorData};
use crate::error::{Error, Result};
use crate::quant::{QAdd, QBlock, QConv, QDense, QNetwork, QuantParams, Requant};
use crate::tcn::{ArchConfig, Network, TrainConfig};

/// A loaded model of either kind.
#[derive(Debug, Clone)]
pub enum Model {
    Float(Network<f32>),
    Quantized(QNetwork),
}

impl Model {
    pub fn arch(&self) -> &ArchConfig {
        match self {
            Model::Float(n) => &n.arch,
            Model::Quantized(q) => &q.arch,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.is_quantized() {
            decode_quantized(c).map(Model::Quantized)
        } else {
            decode_float(c).map(Model::Float)
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, Container)> {
        let c = Container::read(path)?;
        Ok((Self::from_container(&c)?, c))
    }
}

fn put_arch(c: &mut Container, a: &ArchConfig) {
    c.set_meta("input_len", a.input_len);
    c.set_meta("entry_filters", a.entry_filters);
    c.set_meta("block_filters", a.block_filters);
    c.set_meta("block_kernel", a.block_kernel);
    c.set_meta("levels", a.levels);
    c.set_meta("n_classes", a.n_classes);
    c.set_meta("dropout_p", a.dropout_p);
    c.set_meta("bn_eps", a.bn_eps);
    c.set_meta("bn_momentum", a.bn_momentum);
}

fn get_arch(c: &Container) -> Result<ArchConfig> {
    let a = ArchConfig {
        input_len: c.meta_parse("input_len")?,
        entry_filters: c.meta_parse("entry_filters")?,
        block_filters: c.meta_parse("block_filters")?,
        block_kernel: c.meta_parse("block_kernel")?,
        levels: c.meta_parse("levels")?,
        n_classes: c.meta_parse("n_classes")?,
        dropout_p: c.meta_parse("dropout_p")?,
        bn_eps: c.meta_parse("bn_eps")?,
        bn_momentum: c.meta_parse("bn_momentum")?,
    };
    a.validate()
        .map_err(|e| Error::Container(format!("architecture metadata: {e}")))?;
    Ok(a)
}

/// Records the training hyperparameters next to the weights.
pub fn put_train_config(c: &mut Container, t: &TrainConfig) {
    c.set_meta("train.batch_size", t.batch_size);
    c.set_meta("train.lr", t.lr);
    c.set_meta("train.epochs", t.epochs);
    c.set_meta("train.beta1", t.beta1);
    c.set_meta("train.beta2", t.beta2);
    c.set_meta("train.eps", t.eps);
    c.set_meta("train.seed", t.seed);
}

pub fn encode_float(net: &Network<f32>) -> Container {
    let mut c = Container::default();
    c.set_meta("quantized", 0);
    c.set_meta(
        "folded",
        (net.bn_count() == 0 && !net.blocks.is_empty()) as u8,
    );
    put_arch(&mut c, &net.arch);
    net.visit(&mut |name, _, dims, t| c.push(name, dims.to_vec(), TensorData::Real32(t.to_vec())));
    c
}

fn check_consumed(c: &Container, used: &BTreeSet<String>) -> Result<()> {
    match c.tensors.iter().find(|t| !used.contains(&t.name)) {
        Some(t) => Err(Error::Structure(format!("unexpected tensor {:?}", t.name))),
        None => Ok(()),
    }
}

pub fn decode_float(c: &Container) -> Result<Network<f32>> {
    if c.is_quantized() {
        return Err(Error::Container("container holds a quantized model".into()));
    }
    let arch = get_arch(c)?;
    let mut net = Network::<f32>::build(&arch, 0)?;
    for (i, b) in net.blocks.iter_mut().enumerate() {
        if !c.has(&format!("block{i}.bn1.gamma")) {
            b.bn1 = None;
        }
        if !c.has(&format!("block{i}.bn2.gamma")) {
            b.bn2 = None;
        }
        match &mut b.skip {
            Some(s) if !c.has(&format!("block{i}.skip.bn.gamma")) => s.bn = None,
            Some(_) => {}
            None => {
                for part in ["skip.bn.gamma", "skip.conv.weight"] {
                    if c.has(&format!("block{i}.{part}")) {
                        return Err(Error::Structure(format!(
                            "block{i}.{part} present but block {i} has no skip convolution \
                             (batch norm not preceded by a conv)"
                        )));
                    }
                }
            }
        }
    }
    let mut expected = Vec::new();
    net.visit(&mut |name, _, dims, _| expected.push((name.to_string(), dims.to_vec())));
    for (name, dims) in &expected {
        let t = c
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name:?}")))?;
        if &t.dims != dims {
            return Err(Error::Container(format!(
                "tensor {name:?} has dims {:?}, expected {dims:?}",
                t.dims
            )));
        }
    }
    let mut err = None;
    net.visit_mut(&mut |name, _, t| match c.real32(name) {
        Ok(v) => t.copy_from_slice(v),
        Err(e) => {
            err.get_or_insert(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    check_consumed(c, &expected.into_iter().map(|(n, _)| n).collect())?;
    Ok(net)
}

fn conv_prefixes(q: &QNetwork) -> Vec<(String, &QConv)> {
    let mut v = vec![("entry".to_string(), &q.entry)];
    for (i, b) in q.blocks.iter().enumerate() {
        v.push((format!("block{i}.conv1"), &b.conv1));
        v.push((format!("block{i}.conv2"), &b.conv2));
        if let Some(s) = &b.skip {
            v.push((format!("block{i}.skip"), s));
        }
    }
    v
}

fn push_qp(c: &mut Container, p: &str, qp: QuantParams) {
    c.push(
        format!("{p}.scale"),
        vec![1],
        TensorData::Real32(vec![qp.scale]),
    );
    c.push(
        format!("{p}.zero_point"),
        vec![1],
        TensorData::Int32(vec![qp.zero_point]),
    );
}

fn push_requant(c: &mut Container, name: String, r: Requant) {
    c.push(
        name,
        vec![2],
        TensorData::Int32(vec![r.mult, r.shift as i32]),
    );
}

pub fn encode_quantized(q: &QNetwork) -> Container {
    let mut c = Container::default();
    c.set_meta("quantized", 1);
    put_arch(&mut c, &q.arch);
    push_qp(&mut c, "input", q.input_qp);
    for (p, l) in conv_prefixes(q) {
        c.push(
            format!("{p}.weight"),
            vec![l.out_ch, l.in_ch, l.kernel],
            TensorData::Int8(l.weight.clone()),
        );
        c.push(
            format!("{p}.bias"),
            vec![l.out_ch],
            TensorData::Int32(l.bias.clone()),
        );
        c.push(
            format!("{p}.weight_scale"),
            vec![1],
            TensorData::Real32(vec![l.weight_scale]),
        );
        c.push(
            format!("{p}.dilation"),
            vec![1],
            TensorData::Int32(vec![l.dilation as i32]),
        );
        push_requant(&mut c, format!("{p}.requant"), l.requant);
        push_qp(&mut c, &format!("{p}.out"), l.out_qp);
    }
    for (i, b) in q.blocks.iter().enumerate() {
        push_requant(&mut c, format!("block{i}.add.requant_a"), b.add.requant_a);
        push_requant(&mut c, format!("block{i}.add.requant_b"), b.add.requant_b);
        push_qp(&mut c, &format!("block{i}.out"), b.add.out_qp);
    }
    let h = &q.head;
    c.push(
        "head.weight",
        vec![h.out_features, h.in_features],
        TensorData::Int8(h.weight.clone()),
    );
    c.push(
        "head.bias",
        vec![h.out_features],
        TensorData::Int32(h.bias.clone()),
    );
    c.push(
        "head.weight_scale",
        vec![1],
        TensorData::Real32(vec![h.weight_scale]),
    );
    push_qp(&mut c, "logits", h.logit_qp);
    c
}

struct QReader<'a> {
    c: &'a Container,
    used: BTreeSet<String>,
}

impl QReader<'_> {
    fn tensor_dims(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        let t = self
            .c
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name:?}")))?;
        if t.dims != dims {
            return Err(Error::Container(format!(
                "tensor {name:?} has dims {:?}, expected {dims:?}",
                t.dims
            )));
        }
        self.used.insert(name.to_string());
        Ok(())
    }

    fn scalar_f32(&mut self, name: &str) -> Result<f32> {
        self.tensor_dims(name, &[1])?;
        Ok(self.c.real32(name)?[0])
    }

    fn scalar_i32(&mut self, name: &str) -> Result<i32> {
        self.tensor_dims(name, &[1])?;
        Ok(self.c.int32(name)?[0])
    }

    fn scale(&mut self, name: &str) -> Result<f32> {
        let s = self.scalar_f32(name)?;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Container(format!(
                "{name} = {s} is not a positive scale"
            )));
        }
        Ok(s)
    }

    fn qp(&mut self, p: &str) -> Result<QuantParams> {
        let scale = self.scale(&format!("{p}.scale"))?;
        let zero_point = self.scalar_i32(&format!("{p}.zero_point"))?;
        if !(-128..=127).contains(&zero_point) {
            return Err(Error::Container(format!(
                "{p}.zero_point = {zero_point} outside int8"
            )));
        }
        Ok(QuantParams { scale, zero_point })
    }

    fn requant(&mut self, name: &str) -> Result<Requant> {
        self.tensor_dims(name, &[2])?;
        let v = self.c.int32(name)?;
        let (mult, shift) = (v[0], v[1]);
        if !((1 << 30)..=i32::MAX).contains(&mult)
            || !(1..=Requant::MAX_SHIFT as i32).contains(&shift)
        {
            return Err(Error::Container(format!(
                "{name} = ({mult}, {shift}) is not a normalized multiplier"
            )));
        }
        Ok(Requant {
            mult,
            shift: shift as u32,
        })
    }

    fn conv(&mut self, p: &str, in_ch: usize, out_ch: usize, relu: bool) -> Result<QConv> {
        let wname = format!("{p}.weight");
        let dims = self
            .c
            .get(&wname)
            .ok_or_else(|| Error::Container(format!("missing tensor {wname:?}")))?
            .dims
            .clone();
        if dims.len() != 3 || dims[0] != out_ch || dims[1] != in_ch || dims[2] == 0 {
            return Err(Error::Container(format!(
                "tensor {wname:?} has dims {dims:?}, expected [{out_ch}, {in_ch}, K]"
            )));
        }
        self.tensor_dims(&wname, &dims)?;
        self.tensor_dims(&format!("{p}.bias"), &[out_ch])?;
        let dilation = self.scalar_i32(&format!("{p}.dilation"))?;
        if dilation < 1 {
            return Err(Error::Container(format!("{p}.dilation = {dilation}")));
        }
        let weight_scale = self.scale(&format!("{p}.weight_scale"))?;
        Ok(QConv {
            in_ch,
            out_ch,
            kernel: dims[2],
            dilation: dilation as usize,
            weight: self.c.int8(&wname)?.to_vec(),
            bias: self.c.int32(&format!("{p}.bias"))?.to_vec(),
            weight_scale,
            requant: self.requant(&format!("{p}.requant"))?,
            out_qp: self.qp(&format!("{p}.out"))?,
            relu,
        })
    }
}

pub fn decode_quantized(c: &Container) -> Result<QNetwork> {
    if !c.is_quantized() {
        return Err(Error::Container("container holds a float model".into()));
    }
    let arch = get_arch(c)?;
    let mut r = QReader {
        c,
        used: BTreeSet::new(),
    };
    let input_qp = r.qp("input")?;
    let entry = r.conv("entry", 1, arch.entry_filters, false)?;
    let mut in_ch = arch.entry_filters;
    let ft = arch.block_filters;
    let mut blocks = Vec::with_capacity(arch.levels);
    for i in 0..arch.levels {
        let conv1 = r.conv(&format!("block{i}.conv1"), in_ch, ft, true)?;
        let conv2 = r.conv(&format!("block{i}.conv2"), ft, ft, false)?;
        let has_skip = c.has(&format!("block{i}.skip.weight"));
        if has_skip != (in_ch != ft) {
            return Err(Error::Structure(format!(
                "block {i}: skip convolution {} but block maps {in_ch} to {ft} channels",
                if has_skip { "present" } else { "missing" }
            )));
        }
        let skip = if has_skip {
            Some(r.conv(&format!("block{i}.skip"), in_ch, ft, false)?)
        } else {
            None
        };
        let add = QAdd {
            requant_a: r.requant(&format!("block{i}.add.requant_a"))?,
            requant_b: r.requant(&format!("block{i}.add.requant_b"))?,
            out_qp: r.qp(&format!("block{i}.out"))?,
        };
        in_ch = ft;
        blocks.push(QBlock {
            conv1,
            conv2,
            skip,
            add,
        });
    }
    let in_features = arch.feature_channels() * arch.input_len;
    r.tensor_dims("head.weight", &[arch.n_classes, in_features])?;
    r.tensor_dims("head.bias", &[arch.n_classes])?;
    let head = QDense {
        in_features,
        out_features: arch.n_classes,
        weight: c.int8("head.weight")?.to_vec(),
        bias: c.int32("head.bias")?.to_vec(),
        weight_scale: r.scale("head.weight_scale")?,
        logit_qp: r.qp("logits")?,
    };
    check_consumed(c, &r.used)?;
    let q = QNetwork {
        arch,
        input_qp,
        entry,
        blocks,
        head,
    };
    q.check_bounds()?;
    Ok(q)
}
