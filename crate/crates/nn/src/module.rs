use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    shape_err, AdaptiveAvgPool2d, AvgPool2d, BatchNorm2d, Conv2d, Dropout, Flatten, Linear,
    MaxPool2d, Relu,
};
use crate::tensor::Tensor;

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Non-learnable state (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

impl Buffer {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self { shape, value }
    }
}

/// Children run in order. An empty child name adds no path segment.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub children: Vec<(String, Module)>,
}

/// `body(x) + shortcut(x)`; the shortcut is the identity when absent.
#[derive(Clone, Debug)]
pub struct Residual {
    pub body: Box<Module>,
    pub shortcut: Option<(String, Box<Module>)>,
}

/// Runs every branch on the same input and concatenates along channels.
#[derive(Clone, Debug)]
pub struct Concat {
    pub branches: Vec<(String, Module)>,
    split: Option<Vec<usize>>,
}

/// `cat(x, body(x))` along channels.
#[derive(Clone, Debug)]
pub struct DenseConcat {
    pub body: Box<Module>,
    in_channels: Option<usize>,
}

#[derive(Clone, Debug)]
pub enum Module {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu(Relu),
    MaxPool2d(MaxPool2d),
    AvgPool2d(AvgPool2d),
    AdaptiveAvgPool2d(AdaptiveAvgPool2d),
    Flatten(Flatten),
    Linear(Linear),
    Dropout(Dropout),
    Sequential(Sequential),
    Residual(Residual),
    Concat(Concat),
    DenseConcat(DenseConcat),
}

fn join(prefix: &str, name: &str) -> String {
    match (prefix.is_empty(), name.is_empty()) {
        (true, _) => name.to_string(),
        (_, true) => prefix.to_string(),
        _ => format!("{prefix}.{name}"),
    }
}

fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", "at least one branch", [0; 4]))?;
    let [n, _, h, w] = first.dims();
    for p in parts {
        if p.batch() != n || p.height() != h || p.width() != w {
            return Err(shape_err("concat", format!("[{n}, _, {h}, {w}]"), p.dims()));
        }
    }
    let c: usize = parts.iter().map(Tensor::channels).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(i));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = x.dims();
    if sizes.iter().sum::<usize>() != c {
        return Err(shape_err(
            "concat backward",
            format!("{sizes:?} channels"),
            x.dims(),
        ));
    }
    let hw = h * w;
    let mut out: Vec<Vec<f32>> = sizes
        .iter()
        .map(|s| Vec::with_capacity(n * s * hw))
        .collect();
    for i in 0..n {
        let mut off = 0;
        let xs = x.sample(i);
        for (buf, &s) in out.iter_mut().zip(sizes) {
            buf.extend_from_slice(&xs[off * hw..(off + s) * hw]);
            off += s;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::from_vec([n, s, h, w], d))
        .collect()
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: impl Into<String>, m: impl Into<Module>) -> Self {
        self.children.push((name.into(), m.into()));
        self
    }

    /// Appends an unnamed child.
    pub fn then(self, m: impl Into<Module>) -> Self {
        self.push("", m)
    }
}

impl Residual {
    pub fn new(body: impl Into<Module>, shortcut: Option<(&str, Module)>) -> Self {
        Self {
            body: Box::new(body.into()),
            shortcut: shortcut.map(|(n, m)| (n.to_string(), Box::new(m))),
        }
    }
}

impl Concat {
    pub fn new(branches: Vec<(String, Module)>) -> Self {
        Self {
            branches,
            split: None,
        }
    }
}

impl DenseConcat {
    pub fn new(body: impl Into<Module>) -> Self {
        Self {
            body: Box::new(body.into()),
            in_channels: None,
        }
    }
}

macro_rules! impl_from {
    ($($v:ident),*) => {$(
        impl From<$v> for Module {
            fn from(m: $v) -> Self {
                Module::$v(m)
            }
        }
    )*};
}
impl_from!(
    Conv2d,
    BatchNorm2d,
    Relu,
    MaxPool2d,
    AvgPool2d,
    AdaptiveAvgPool2d,
    Flatten,
    Linear,
    Dropout,
    Sequential,
    Residual,
    Concat,
    DenseConcat
);

impl Module {
    /// Output `[c, h, w]` for an input `[c, h, w]`, or a shape error.
    pub fn out_dims(&self, chw: [usize; 3]) -> Result<[usize; 3]> {
        match self {
            Module::Conv2d(l) => l.out_dims(chw),
            Module::BatchNorm2d(l) => {
                if chw[0] != l.channels() {
                    return Err(shape_err(
                        "batchnorm2d",
                        format!("{} channels", l.channels()),
                        [0, chw[0], chw[1], chw[2]],
                    ));
                }
                Ok(chw)
            }
            Module::Relu(_) | Module::Dropout(_) => Ok(chw),
            Module::MaxPool2d(l) => l.out_dims(chw),
            Module::AvgPool2d(l) => l.out_dims(chw),
            Module::AdaptiveAvgPool2d(l) => l.out_dims(chw),
            Module::Flatten(_) => Ok([chw.iter().product(), 1, 1]),
            Module::Linear(l) => l.out_dims(chw),
            Module::Sequential(s) => s.children.iter().try_fold(chw, |d, (_, m)| m.out_dims(d)),
            Module::Residual(r) => {
                let body = r.body.out_dims(chw)?;
                let short = match &r.shortcut {
                    Some((_, m)) => m.out_dims(chw)?,
                    None => chw,
                };
                if body != short {
                    return Err(shape_err(
                        "residual",
                        format!("matching branch dims {body:?}"),
                        [0, short[0], short[1], short[2]],
                    ));
                }
                Ok(body)
            }
            Module::Concat(c) => {
                let mut total = 0;
                let mut spatial = None;
                for (_, b) in &c.branches {
                    let [bc, h, w] = b.out_dims(chw)?;
                    if spatial.is_some_and(|s| s != (h, w)) {
                        return Err(shape_err("concat", "equal branch extents", [0, bc, h, w]));
                    }
                    spatial = Some((h, w));
                    total += bc;
                }
                let (h, w) = spatial.ok_or_else(|| shape_err("concat", "a branch", [0; 4]))?;
                Ok([total, h, w])
            }
            Module::DenseConcat(d) => {
                let [bc, h, w] = d.body.out_dims(chw)?;
                if (h, w) != (chw[1], chw[2]) {
                    return Err(shape_err(
                        "dense concat",
                        "extent-preserving body",
                        [0, bc, h, w],
                    ));
                }
                Ok([chw[0] + bc, h, w])
            }
        }
    }

    /// Evaluation-mode forward pass. Takes `&self` and caches nothing, so a
    /// built module can serve concurrent callers.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Module::Conv2d(l) => l.eval(x),
            Module::BatchNorm2d(l) => l.eval(x),
            Module::Relu(l) => Ok(l.eval(x)),
            Module::MaxPool2d(l) => l.eval(x),
            Module::AvgPool2d(l) => l.eval(x),
            Module::AdaptiveAvgPool2d(l) => l.eval(x),
            Module::Flatten(l) => l.eval(x),
            Module::Linear(l) => l.eval(x),
            Module::Dropout(l) => Ok(l.eval(x)),
            Module::Sequential(s) => {
                let mut cur = x.clone();
                for (_, m) in &s.children {
                    cur = m.eval(&cur)?;
                }
                Ok(cur)
            }
            Module::Residual(r) => {
                let mut y = r.body.eval(x)?;
                let short = match &r.shortcut {
                    Some((_, m)) => m.eval(x)?,
                    None => x.clone(),
                };
                if y.dims() != short.dims() {
                    return Err(shape_err(
                        "residual",
                        format!("{:?}", y.dims()),
                        short.dims(),
                    ));
                }
                add_into(&mut y, &short);
                Ok(y)
            }
            Module::Concat(c) => {
                let parts = c
                    .branches
                    .iter()
                    .map(|(_, b)| b.eval(x))
                    .collect::<Result<Vec<_>>>()?;
                concat_channels(&parts)
            }
            Module::DenseConcat(d) => {
                let y = d.body.eval(x)?;
                concat_channels(&[x.clone(), y])
            }
        }
    }

    /// Training-mode forward pass; caches activations for [`Module::backward`].
    pub fn forward_train<R: Rng + ?Sized>(&mut self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        match self {
            Module::Conv2d(l) => l.forward_train(x),
            Module::BatchNorm2d(l) => l.forward_train(x),
            Module::Relu(l) => Ok(l.forward_train(x)),
            Module::MaxPool2d(l) => l.forward_train(x),
            Module::AvgPool2d(l) => l.forward_train(x),
            Module::AdaptiveAvgPool2d(l) => l.forward_train(x),
            Module::Flatten(l) => l.forward_train(x),
            Module::Linear(l) => l.forward_train(x),
            Module::Dropout(l) => Ok(l.forward_train(x, rng)),
            Module::Sequential(s) => {
                let mut cur = x.clone();
                for (_, m) in &mut s.children {
                    cur = m.forward_train(&cur, rng)?;
                }
                Ok(cur)
            }
            Module::Residual(r) => {
                let mut y = r.body.forward_train(x, rng)?;
                let short = match &mut r.shortcut {
                    Some((_, m)) => m.forward_train(x, rng)?,
                    None => x.clone(),
                };
                if y.dims() != short.dims() {
                    return Err(shape_err(
                        "residual",
                        format!("{:?}", y.dims()),
                        short.dims(),
                    ));
                }
                add_into(&mut y, &short);
                Ok(y)
            }
            Module::Concat(c) => {
                let mut parts = Vec::with_capacity(c.branches.len());
                for (_, b) in &mut c.branches {
                    parts.push(b.forward_train(x, rng)?);
                }
                c.split = Some(parts.iter().map(Tensor::channels).collect());
                concat_channels(&parts)
            }
            Module::DenseConcat(d) => {
                let y = d.body.forward_train(x, rng)?;
                d.in_channels = Some(x.channels());
                concat_channels(&[x.clone(), y])
            }
        }
    }

    /// Back-propagates `dy`, accumulating parameter gradients. Returns the
    /// input gradient when `need_dx` is set.
    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let some = |t: Tensor| Ok(Some(t));
        match self {
            Module::Conv2d(l) => l.backward(dy, need_dx),
            Module::BatchNorm2d(l) => some(l.backward(dy)?),
            Module::Relu(l) => some(l.backward(dy)?),
            Module::MaxPool2d(l) => some(l.backward(dy)?),
            Module::AvgPool2d(l) => some(l.backward(dy)?),
            Module::AdaptiveAvgPool2d(l) => some(l.backward(dy)?),
            Module::Flatten(l) => some(l.backward(dy)?),
            Module::Linear(l) => l.backward(dy, need_dx),
            Module::Dropout(l) => some(l.backward(dy)?),
            Module::Sequential(s) => {
                let mut cur = Some(dy.clone());
                for (idx, (_, m)) in s.children.iter_mut().enumerate().rev() {
                    let g = cur.take().ok_or(Error::NoCache("sequential"))?;
                    cur = m.backward(&g, idx > 0 || need_dx)?;
                }
                Ok(if need_dx { cur } else { None })
            }
            Module::Residual(r) => {
                let body = r.body.backward(dy, need_dx)?;
                let short = match &mut r.shortcut {
                    Some((_, m)) => m.backward(dy, need_dx)?,
                    None => need_dx.then(|| dy.clone()),
                };
                match (body, short) {
                    (Some(mut b), Some(s)) => {
                        add_into(&mut b, &s);
                        Ok(Some(b))
                    }
                    _ => Ok(None),
                }
            }
            Module::Concat(c) => {
                let split = c.split.take().ok_or(Error::NoCache("concat"))?;
                let grads = split_channels(dy, &split)?;
                let mut acc: Option<Tensor> = None;
                for ((_, b), g) in c.branches.iter_mut().zip(&grads) {
                    if let Some(dx) = b.backward(g, need_dx)? {
                        match &mut acc {
                            Some(a) => add_into(a, &dx),
                            None => acc = Some(dx),
                        }
                    }
                }
                Ok(acc)
            }
            Module::DenseConcat(d) => {
                let cin = d.in_channels.take().ok_or(Error::NoCache("dense concat"))?;
                let parts = split_channels(dy, &[cin, dy.channels() - cin.min(dy.channels())])?;
                let body = d.body.backward(&parts[1], need_dx)?;
                Ok(body.map(|mut b| {
                    add_into(&mut b, &parts[0]);
                    b
                }))
            }
        }
    }

    fn children(&self) -> Vec<(&str, &Module)> {
        match self {
            Module::Sequential(s) => s.children.iter().map(|(n, m)| (n.as_str(), m)).collect(),
            Module::Residual(r) => {
                let mut v = vec![("", r.body.as_ref())];
                if let Some((n, m)) = &r.shortcut {
                    v.push((n.as_str(), m.as_ref()));
                }
                v
            }
            Module::Concat(c) => c.branches.iter().map(|(n, m)| (n.as_str(), m)).collect(),
            Module::DenseConcat(d) => vec![("", d.body.as_ref())],
            _ => Vec::new(),
        }
    }

    fn children_mut(&mut self) -> Vec<(&str, &mut Module)> {
        match self {
            Module::Sequential(s) => s
                .children
                .iter_mut()
                .map(|(n, m)| (n.as_str(), m))
                .collect(),
            Module::Residual(r) => {
                let mut v = vec![("", r.body.as_mut())];
                if let Some((n, m)) = &mut r.shortcut {
                    v.push((n.as_str(), m.as_mut()));
                }
                v
            }
            Module::Concat(c) => c
                .branches
                .iter_mut()
                .map(|(n, m)| (n.as_str(), m))
                .collect(),
            Module::DenseConcat(d) => vec![("", d.body.as_mut())],
            _ => Vec::new(),
        }
    }

    fn leaf_params(&self) -> Vec<(&'static str, &Param)> {
        match self {
            Module::Conv2d(l) => {
                let mut v = vec![("weight", &l.weight)];
                if let Some(b) = &l.bias {
                    v.push(("bias", b));
                }
                v
            }
            Module::BatchNorm2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Module::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => Vec::new(),
        }
    }

    fn leaf_params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            Module::Conv2d(l) => {
                let mut v = vec![("weight", &mut l.weight)];
                if let Some(b) = &mut l.bias {
                    v.push(("bias", b));
                }
                v
            }
            Module::BatchNorm2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Module::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            _ => Vec::new(),
        }
    }

    /// Parameters in definition order with dotted names.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (n, p) in self.leaf_params() {
            out.push((join(prefix, n), p));
        }
        for (n, c) in self.children() {
            c.collect_params(&join(prefix, n), out);
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let prefix = prefix.to_string();
        if matches!(
            self,
            Module::Conv2d(_) | Module::BatchNorm2d(_) | Module::Linear(_)
        ) {
            for (n, p) in self.leaf_params_mut() {
                out.push((join(&prefix, n), p));
            }
            return;
        }
        for (n, c) in self.children_mut() {
            c.collect_params_mut(&join(&prefix, n), out);
        }
    }

    pub fn named_buffers(&self) -> Vec<(String, &Buffer)> {
        let mut out = Vec::new();
        self.collect_buffers("", &mut out);
        out
    }

    fn collect_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        if let Module::BatchNorm2d(l) = self {
            out.push((join(prefix, "running_mean"), &l.running_mean));
            out.push((join(prefix, "running_var"), &l.running_var));
        }
        for (n, c) in self.children() {
            c.collect_buffers(&join(prefix, n), out);
        }
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Buffer)> {
        let mut out = Vec::new();
        self.collect_buffers_mut("", &mut out);
        out
    }

    fn collect_buffers_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Buffer)>,
    ) {
        let prefix = prefix.to_string();
        if let Module::BatchNorm2d(l) = self {
            out.push((join(&prefix, "running_mean"), &mut l.running_mean));
            out.push((join(&prefix, "running_var"), &mut l.running_var));
            return;
        }
        for (n, c) in self.children_mut() {
            c.collect_buffers_mut(&join(&prefix, n), out);
        }
    }

    /// Total learnable scalars.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Re-initializes every conv and linear layer in definition order;
    /// batch norms reset to identity.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        match self {
            Module::Conv2d(l) => l.init(rng),
            Module::Linear(l) => l.init(rng),
            Module::BatchNorm2d(l) => {
                l.weight.value.iter_mut().for_each(|v| *v = 1.0);
                l.bias.value.iter_mut().for_each(|v| *v = 0.0);
                l.running_mean.value.iter_mut().for_each(|v| *v = 0.0);
                l.running_var.value.iter_mut().for_each(|v| *v = 1.0);
            }
            _ => {
                for (_, c) in self.children_mut() {
                    c.init(rng);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Drops every cached activation.
    pub fn clear_cache(&mut self) {
        match self {
            Module::Conv2d(l) => l.clear_cache(),
            Module::BatchNorm2d(l) => l.clear_cache(),
            Module::Relu(l) => l.clear_cache(),
            Module::MaxPool2d(l) => l.clear_cache(),
            Module::AvgPool2d(l) => l.clear_cache(),
            Module::AdaptiveAvgPool2d(l) => l.clear_cache(),
            Module::Flatten(l) => l.clear_cache(),
            Module::Linear(l) => l.clear_cache(),
            Module::Dropout(l) => l.clear_cache(),
            Module::Concat(c) => {
                c.split = None;
                c.branches.iter_mut().for_each(|(_, b)| b.clear_cache());
            }
            Module::DenseConcat(d) => {
                d.in_channels = None;
                d.body.clear_cache();
            }
            _ => {
                for (_, c) in self.children_mut() {
                    c.clear_cache();
                }
            }
        }
    }

    /// Copies named values into matching parameters and buffers. Every
    /// parameter and buffer must be present; extra entries are ignored.
    pub fn load_state<'a, F>(&mut self, mut lookup: F) -> Result<()>
    where
        F: FnMut(&str) -> Option<&'a [f32]>,
    {
        for (name, p) in self.named_params_mut() {
            let v = lookup(&name).ok_or_else(|| Error::MissingState(name.clone()))?;
            if v.len() != p.len() {
                return Err(Error::StateSize {
                    name,
                    expected: p.len(),
                    got: v.len(),
                });
            }
            p.value.copy_from_slice(v);
        }
        for (name, b) in self.named_buffers_mut() {
            let v = lookup(&name).ok_or_else(|| Error::MissingState(name.clone()))?;
            if v.len() != b.value.len() {
                return Err(Error::StateSize {
                    name,
                    expected: b.value.len(),
                    got: v.len(),
                });
            }
            b.value.copy_from_slice(v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block() -> Module {
        let body = Sequential::new()
            .push("conv1", Conv2d::square(2, 2, 3, 1, 1, false))
            .push("bn1", BatchNorm2d::new(2, 1e-5));
        Sequential::new()
            .push(
                "0",
                Residual::new(
                    body,
                    Some(("downsample", Conv2d::square(2, 2, 1, 1, 0, false).into())),
                ),
            )
            .into()
    }

    #[test]
    fn names_follow_dotted_paths() {
        let m = Sequential::new().push("layer1", block()).into_module();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "layer1.0.conv1.weight",
                "layer1.0.bn1.weight",
                "layer1.0.bn1.bias",
                "layer1.0.downsample.weight"
            ]
        );
        let bufs: Vec<String> = m.named_buffers().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            bufs,
            ["layer1.0.bn1.running_mean", "layer1.0.bn1.running_var"]
        );
        let mut m = m;
        let muts: Vec<String> = m.named_params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(muts, names);
    }

    #[test]
    fn concat_and_dense_shapes() {
        let inception = Module::from(Concat::new(vec![
            ("a".into(), Conv2d::square(4, 3, 1, 1, 0, false).into()),
            ("b".into(), Conv2d::square(4, 5, 3, 1, 1, false).into()),
        ]));
        assert_eq!(inception.out_dims([4, 6, 6]).unwrap(), [8, 6, 6]);
        let dense = Module::from(DenseConcat::new(Conv2d::square(4, 2, 3, 1, 1, false)));
        assert_eq!(dense.out_dims([4, 6, 6]).unwrap(), [6, 6, 6]);
        let y = dense.eval(&Tensor::zeros([2, 4, 6, 6])).unwrap();
        assert_eq!(y.dims(), [2, 6, 6, 6]);
    }

    #[test]
    fn load_state_requires_every_entry() {
        let mut m = block();
        let err = m.load_state(|_| None).unwrap_err();
        assert!(matches!(err, Error::MissingState(_)));
    }

    impl Sequential {
        fn into_module(self) -> Module {
            self.into()
        }
    }
}
