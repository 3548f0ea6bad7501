//! Full network: stem, stacked cells and classifier head.
//!
//! The stem is a stride-2 then a stride-1 `3×3` convolution, each followed
//! by batch norm, widening the image to `3·init_channels` channels. Cells
//! follow; the channel count doubles at each of the two reduce cells. Every
//! cell first adapts its two inputs to its own channel count (and, after a
//! reduction, to its resolution) with `1×1` convolutions. The head is
//! global average pooling and one linear layer.
//!
//! The same builder produces the relaxed supernet (mixed edges, driven by
//! [`AlphaParams`]) and the fixed network described by a [`Genotype`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::genotype::{validate, Genotype};
use crate::ops::Conv2dOptions;
use crate::params::{Frame, Mode, ParamStore};
use crate::search_space::{BoundAlphas, Candidate, CellKind, OperatorMask, RelaxedCell, NUM_NODES};
use crate::tensor::{Real, Tensor};

/// Stacking plan shared by search and final training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub num_cells: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    /// Defaults to `[⌊N/3⌋, ⌊2N/3⌋]`.
    pub reduce_positions: Option<[usize; 2]>,
    pub input_size: usize,
    pub operator_mask: OperatorMask,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_cells: 6,
            init_channels: 16,
            num_classes: 21,
            reduce_positions: None,
            input_size: 32,
            operator_mask: OperatorMask::full(),
        }
    }
}

impl NetworkConfig {
    pub fn reduce_positions(&self) -> [usize; 2] {
        self.reduce_positions
            .unwrap_or([self.num_cells / 3, 2 * self.num_cells / 3])
    }

    pub fn is_reduce(&self, cell: usize) -> bool {
        self.reduce_positions().contains(&cell)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_cells < 3 {
            return bad(format!("num_cells must be at least 3, got {}", self.num_cells));
        }
        if self.init_channels == 0 {
            return bad("init_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let [a, b] = self.reduce_positions();
        if a == b || a >= self.num_cells || b >= self.num_cells {
            return bad(format!(
                "reduce_positions {:?} must be two distinct cells in [0, {})",
                [a, b],
                self.num_cells
            ));
        }
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return bad(format!(
                "input_size {} must be a positive multiple of 8",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Spatial size of the last cell output, before global pooling.
    pub fn feature_size(&self) -> usize {
        self.input_size / 8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NetMode {
    Relaxed,
    Fixed(Genotype),
}

/// `1×1` convolution + batch norm bringing a cell input to the cell's width.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub prefix: String,
    pub stride: usize,
}

impl Adapter {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: String,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        store.add_conv(&format!("{prefix}.conv"), [cout, cin, 1, 1], rng)?;
        store.add_batch_norm(&format!("{prefix}.bn"), cout, true)?;
        Ok(Adapter { prefix, stride })
    }

    pub fn forward<T: Real>(&self, frame: &Frame<'_, T>, x: Var) -> Result<Var> {
        let w = frame.param(&format!("{}.conv", self.prefix))?;
        let y = frame
            .tape()
            .conv2d(x, w, None, Conv2dOptions::default().stride(self.stride))?;
        frame.batch_norm(&format!("{}.bn", self.prefix), y, true)
    }
}

/// A cell built from a genotype: two branches per node.
#[derive(Clone, Debug)]
pub struct FixedCell {
    pub kind: CellKind,
    pub nodes: Vec<[(usize, Candidate); 2]>,
}

impl FixedCell {
    pub fn forward<T: Real>(&self, frame: &Frame<'_, T>, prev_prev: Var, prev: Var) -> Result<Var> {
        let tape = frame.tape();
        let mut states = vec![prev_prev, prev];
        for node in &self.nodes {
            let a = node[0].1.forward(frame, states[node[0].0])?;
            let b = node[1].1.forward(frame, states[node[1].0])?;
            states.push(tape.add(a, b)?);
        }
        tape.concat_channels(&states[2..])
    }
}

#[derive(Clone, Debug)]
pub enum CellBody {
    Relaxed(RelaxedCell),
    Fixed(FixedCell),
}

#[derive(Clone, Debug)]
pub struct CellInstance {
    pub index: usize,
    pub kind: CellKind,
    pub channels: usize,
    pub prev_was_reduce: bool,
    pub pre0: Adapter,
    pub pre1: Adapter,
    pub body: CellBody,
}

impl CellInstance {
    /// Aligns both inputs to `channels` channels and equal resolution.
    pub fn input_adapters<T: Real>(&self, frame: &Frame<'_, T>, prev_prev: Var, prev: Var) -> Result<(Var, Var)> {
        Ok((self.pre0.forward(frame, prev_prev)?, self.pre1.forward(frame, prev)?))
    }
}

#[derive(Clone, Debug)]
pub struct SuperNet<T> {
    pub config: NetworkConfig,
    pub mode: NetMode,
    pub params: ParamStore<T>,
    pub cells: Vec<CellInstance>,
    pub final_channels: usize,
}

impl<T: Real> SuperNet<T> {
    pub fn build<R: Rng>(config: &NetworkConfig, mode: NetMode, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if let NetMode::Fixed(g) = &mode {
            validate(g).map_err(Error::InvalidGenotype)?;
        }
        let mut store = ParamStore::new();
        let c = config.init_channels;
        let stem = 3 * c;
        store.add_conv("stem.conv1", [stem, 3, 3, 3], rng)?;
        store.add_batch_norm("stem.bn1", stem, true)?;
        store.add_conv("stem.conv2", [stem, stem, 3, 3], rng)?;
        store.add_batch_norm("stem.bn2", stem, true)?;

        let (mut c_pp, mut c_p, mut c_cur) = (stem, stem, c);
        let mut prev_was_reduce = false;
        let mut cells = Vec::with_capacity(config.num_cells);
        for index in 0..config.num_cells {
            let kind = if config.is_reduce(index) {
                c_cur *= 2;
                CellKind::Reduce
            } else {
                CellKind::Normal
            };
            let prefix = format!("cells.{index:02}");
            let pre0 = Adapter::new(
                &mut store,
                rng,
                format!("{prefix}.pre0"),
                c_pp,
                c_cur,
                if prev_was_reduce { 2 } else { 1 },
            )?;
            let pre1 = Adapter::new(&mut store, rng, format!("{prefix}.pre1"), c_p, c_cur, 1)?;
            let body = match &mode {
                NetMode::Relaxed => CellBody::Relaxed(RelaxedCell::new(
                    &mut store,
                    rng,
                    &prefix,
                    kind,
                    c_cur,
                    &config.operator_mask,
                    false,
                )?),
                NetMode::Fixed(g) => {
                    let mut nodes = Vec::with_capacity(NUM_NODES);
                    for (i, node) in g.cell(kind).nodes.iter().enumerate() {
                        let mut branch = |b: usize| -> Result<(usize, Candidate)> {
                            let br = node[b];
                            let stride = if kind == CellKind::Reduce && br.source < 2 {
                                2
                            } else {
                                1
                            };
                            let name = format!("{prefix}.node{i}.branch{b}.{}", br.op);
                            Ok((
                                br.source,
                                Candidate::new(&mut store, rng, &name, br.op, c_cur, stride, true)?,
                            ))
                        };
                        nodes.push([branch(0)?, branch(1)?]);
                    }
                    CellBody::Fixed(FixedCell { kind, nodes })
                }
            };
            cells.push(CellInstance {
                index,
                kind,
                channels: c_cur,
                prev_was_reduce,
                pre0,
                pre1,
                body,
            });
            prev_was_reduce = kind == CellKind::Reduce;
            c_pp = c_p;
            c_p = NUM_NODES * c_cur;
        }
        store.add_linear("head", c_p, config.num_classes, rng)?;
        Ok(SuperNet {
            config: config.clone(),
            mode,
            params: store,
            cells,
            final_channels: c_p,
        })
    }

    pub fn is_relaxed(&self) -> bool {
        matches!(self.mode, NetMode::Relaxed)
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        match &self.mode {
            NetMode::Fixed(g) => Some(g),
            NetMode::Relaxed => None,
        }
    }

    /// Exact number of scalar weights.
    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.params.set_mode(mode);
    }

    fn check_input(&self, tape: &Tape<T>, images: Var) -> Result<()> {
        let shape = tape.shape(images);
        let s = self.config.input_size;
        match shape.dims() {
            &[_, 3, h, w] if h == s && w == s => Ok(()),
            d => Err(Error::InvalidArgument(format!(
                "expected images of shape (N, 3, {s}, {s}), got {d:?}"
            ))),
        }
    }

    /// Output of the last cell, before global pooling.
    pub fn forward_features(
        &self,
        frame: &Frame<'_, T>,
        alphas: Option<&BoundAlphas<'_, T>>,
        images: Var,
    ) -> Result<Var> {
        let tape = frame.tape();
        self.check_input(tape, images)?;
        match (&self.mode, alphas) {
            (NetMode::Relaxed, None) => {
                return Err(Error::InvalidArgument(
                    "relaxed network needs architecture coefficients".into(),
                ))
            }
            (NetMode::Fixed(_), Some(_)) => {
                return Err(Error::InvalidArgument(
                    "fixed network takes no architecture coefficients".into(),
                ))
            }
            _ => {}
        }
        let w1 = frame.param("stem.conv1")?;
        let x = tape.conv2d(images, w1, None, Conv2dOptions::default().stride(2))?;
        let x = frame.batch_norm("stem.bn1", x, true)?;
        let w2 = frame.param("stem.conv2")?;
        let x = tape.conv2d(x, w2, None, Conv2dOptions::default())?;
        let stem = frame.batch_norm("stem.bn2", x, true)?;

        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let (a, b) = cell.input_adapters(frame, s0, s1)?;
            let out = match (&cell.body, alphas) {
                (CellBody::Relaxed(rc), Some(al)) => rc.forward(frame, a, b, al.coefficients(cell.kind))?,
                (CellBody::Fixed(fc), _) => fc.forward(frame, a, b)?,
                (CellBody::Relaxed(_), None) => unreachable!("checked above"),
            };
            s0 = s1;
            s1 = out;
        }
        Ok(s1)
    }

    /// Logits of shape `(batch, num_classes)`.
    pub fn forward(&self, frame: &Frame<'_, T>, alphas: Option<&BoundAlphas<'_, T>>, images: Var) -> Result<Var> {
        let tape = frame.tape();
        let features = self.forward_features(frame, alphas, images)?;
        let pooled = tape.global_avg_pool(features)?;
        tape.linear(pooled, frame.param("head.weight")?, Some(frame.param("head.bias")?))
    }

    /// Forward pass without gradient bookkeeping, in the store's current mode.
    /// Batch statistics from a training-mode pass are discarded.
    pub fn predict(
        &self,
        images: &Tensor<T>,
        alphas: Option<&crate::search_space::AlphaParams<T>>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let frame = Frame::new(&tape, &self.params);
        let bound = alphas.map(|a| a.bind(&tape)).transpose()?;
        let x = tape.constant(images.clone());
        let logits = self.forward(&frame, bound.as_ref(), x)?;
        Ok((*tape.value(logits)).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::genotype::{Branch, CellGenotype};
    use crate::search_space::{AlphaParams, OperatorKind};

    fn tiny(num_cells: usize, input: usize) -> NetworkConfig {
        NetworkConfig {
            num_cells,
            init_channels: 2,
            num_classes: 4,
            reduce_positions: None,
            input_size: input,
            operator_mask: OperatorMask::full(),
        }
    }

    #[test]
    fn config_bounds() {
        let mut c = tiny(3, 16);
        assert_eq!(c.reduce_positions(), [1, 2]);
        c.validate().unwrap();
        c.reduce_positions = Some([1, 3]);
        assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
        let mut c = tiny(3, 12);
        assert!(c.validate().is_err());
        c.input_size = 16;
        c.num_cells = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logits_shape_and_feature_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = tiny(3, 16);
        let net = SuperNet::<f64>::build(&config, NetMode::Relaxed, &mut rng).unwrap();
        let alphas = AlphaParams::<f64>::random(config.operator_mask.clone(), &mut rng).unwrap();
        let images = Tensor::full([2, 3, 16, 16], 0.1).unwrap();
        let logits = net.predict(&images, Some(&alphas)).unwrap();
        assert_eq!(logits.dims(), &[2, 4]);
        assert!(net.predict(&images, None).is_err());
        let wrong = Tensor::full([2, 3, 8, 8], 0.1).unwrap();
        assert!(matches!(
            net.predict(&wrong, Some(&alphas)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn fixed_net_rejects_alphas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = tiny(3, 16);
        let g = Genotype::new(
            CellGenotype::uniform(OperatorKind::Skip),
            CellGenotype {
                nodes: vec![
                    [
                        Branch::new(0, OperatorKind::MaxPool3),
                        Branch::new(1, OperatorKind::AvgPool3)
                    ];
                    4
                ],
            },
        );
        let net = SuperNet::<f64>::build(&config, NetMode::Fixed(g), &mut rng).unwrap();
        let alphas = AlphaParams::<f64>::random(config.operator_mask.clone(), &mut rng).unwrap();
        let images = Tensor::full([1, 3, 16, 16], 0.1).unwrap();
        assert!(net.predict(&images, Some(&alphas)).is_err());
        assert_eq!(net.predict(&images, None).unwrap().dims(), &[1, 4]);
    }
}
