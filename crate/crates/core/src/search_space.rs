//! The cell search space: candidate operators, architecture coefficients
//! and the relaxed (mixed-edge) cell.
//!
//! A cell has two inputs (source 0 is the output of the cell before the
//! previous one, source 1 the previous cell) and [`NUM_NODES`] internal
//! nodes. Node `i` may read from any source `j < 2 + i`, which gives
//! [`NUM_EDGES`] edges per cell. Edges are numbered node by node, sources in
//! increasing order: node 0 owns rows 0..2, node 1 rows 2..5, and so on.
//! In the relaxed cell every edge carries every candidate operator, mixed by
//! the softmax of its row of architecture coefficients.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::nn::softmax_slice;
use crate::ops::{Conv2dOptions, Padding};
use crate::params::{normal_init, Frame, ParamStore};
use crate::tensor::{Real, Tensor};

pub const NUM_NODES: usize = 4;
pub const NUM_EDGES: usize = 14;
pub const NUM_OPERATORS: usize = 7;

/// Standard deviation of the Gaussian used to initialize coefficients.
pub const ALPHA_INIT_STD: f64 = 1e-3;

/// Candidate operators in canonical order. The order is part of the file
/// formats and of every tie-break.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OperatorKind {
    SepConv3,
    SepConv5,
    AtrousConv3,
    AtrousConv5,
    AvgPool3,
    MaxPool3,
    Skip,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; NUM_OPERATORS] = [
        OperatorKind::SepConv3,
        OperatorKind::SepConv5,
        OperatorKind::AtrousConv3,
        OperatorKind::AtrousConv5,
        OperatorKind::AvgPool3,
        OperatorKind::MaxPool3,
        OperatorKind::Skip,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::SepConv3 => "sep_conv_3x3",
            OperatorKind::SepConv5 => "sep_conv_5x5",
            OperatorKind::AtrousConv3 => "atr_conv_3x3",
            OperatorKind::AtrousConv5 => "atr_conv_5x5",
            OperatorKind::AvgPool3 => "avg_pool_3x3",
            OperatorKind::MaxPool3 => "max_pool_3x3",
            OperatorKind::Skip => "skip",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(
            self,
            OperatorKind::SepConv3 | OperatorKind::SepConv5 | OperatorKind::AtrousConv3 | OperatorKind::AtrousConv5
        )
    }

    pub fn is_atrous(self) -> bool {
        matches!(self, OperatorKind::AtrousConv3 | OperatorKind::AtrousConv5)
    }

    /// Kernel size of convolution and pooling operators.
    pub fn kernel_size(self) -> Option<usize> {
        match self {
            OperatorKind::SepConv3 | OperatorKind::AtrousConv3 | OperatorKind::AvgPool3 | OperatorKind::MaxPool3 => {
                Some(3)
            }
            OperatorKind::SepConv5 | OperatorKind::AtrousConv5 => Some(5),
            OperatorKind::Skip => None,
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operator name {s:?}")))
    }
}

impl Serialize for OperatorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OperatorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The subset of operators that participates in a search, in canonical
/// order. Coefficient rows have one column per active operator.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<OperatorKind>", into = "Vec<OperatorKind>")]
pub struct OperatorMask(Vec<OperatorKind>);

impl OperatorMask {
    pub fn full() -> Self {
        OperatorMask(OperatorKind::ALL.to_vec())
    }

    /// Every operator except the two atrous convolutions.
    pub fn atrous_free() -> Self {
        OperatorMask(OperatorKind::ALL.into_iter().filter(|k| !k.is_atrous()).collect())
    }

    pub fn new(kinds: impl IntoIterator<Item = OperatorKind>) -> Result<Self> {
        let mut kinds: Vec<_> = kinds.into_iter().collect();
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            return Err(Error::InvalidArgument("operator mask is empty".into()));
        }
        Ok(OperatorMask(kinds))
    }

    pub fn kinds(&self) -> &[OperatorKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, kind: OperatorKind) -> bool {
        self.0.contains(&kind)
    }

    pub fn column_of(&self, kind: OperatorKind) -> Option<usize> {
        self.0.iter().position(|&k| k == kind)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.0.iter().map(|k| k.name()).collect()
    }
}

impl TryFrom<Vec<OperatorKind>> for OperatorMask {
    type Error = Error;
    fn try_from(kinds: Vec<OperatorKind>) -> Result<Self> {
        let mask = OperatorMask::new(kinds.iter().copied())?;
        if mask.0 != kinds {
            return Err(Error::InvalidArgument(
                "operator mask must list distinct operators in canonical order".into(),
            ));
        }
        Ok(mask)
    }
}

impl From<OperatorMask> for Vec<OperatorKind> {
    fn from(mask: OperatorMask) -> Self {
        mask.0
    }
}

/// Softmax of one coefficient row, computed with max subtraction.
pub fn softmax_coefficients<T: Real>(row: &[T]) -> Result<Vec<T>> {
    if row.is_empty() {
        return Err(Error::InvalidArgument("empty coefficient row".into()));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite coefficient in {row:?}")));
    }
    let mut out = vec![T::zero(); row.len()];
    softmax_slice(row, &mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduce,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduce => "reduce",
        }
    }
}

/// One edge of a cell: `source → node`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EdgeId {
    pub cell: CellKind,
    pub node: usize,
    pub source: usize,
}

impl EdgeId {
    pub fn new(cell: CellKind, node: usize, source: usize) -> Result<Self> {
        if node >= NUM_NODES || source >= node + 2 {
            return Err(Error::InvalidArgument(format!(
                "edge {source} -> node {node} outside the cell DAG"
            )));
        }
        Ok(EdgeId { cell, node, source })
    }

    /// Row of this edge in a coefficient matrix.
    pub fn row(self) -> usize {
        edge_row(self.node, self.source)
    }

    /// Source is one of the two cell inputs.
    pub fn from_input(self) -> bool {
        self.source < 2
    }

    /// Edges leaving a cell input of a reduce cell halve the resolution.
    pub fn stride(self) -> usize {
        if self.cell == CellKind::Reduce && self.from_input() {
            2
        } else {
            1
        }
    }
}

/// First coefficient row owned by `node`.
pub fn node_row_offset(node: usize) -> usize {
    // node i owns 2 + i rows
    (0..node).map(|i| i + 2).sum()
}

pub fn edge_row(node: usize, source: usize) -> usize {
    node_row_offset(node) + source
}

/// All edges of a cell in row order.
pub fn cell_edges(cell: CellKind) -> impl Iterator<Item = EdgeId> {
    (0..NUM_NODES).flat_map(move |node| (0..node + 2).map(move |source| EdgeId { cell, node, source }))
}

pub const ALPHA_NORMAL: &str = "alpha.normal";
pub const ALPHA_REDUCE: &str = "alpha.reduce";

/// Architecture coefficients: one `14 × |mask|` matrix per cell kind, shared
/// by every cell of that kind.
#[derive(Clone, Debug)]
pub struct AlphaParams<T> {
    mask: OperatorMask,
    pub store: ParamStore<T>,
}

impl<T: Real> AlphaParams<T> {
    /// Gaussian initialization with standard deviation [`ALPHA_INIT_STD`].
    pub fn random<R: Rng>(mask: OperatorMask, rng: &mut R) -> Result<Self> {
        let m = mask.len();
        let normal = normal_init(vec![NUM_EDGES, m], ALPHA_INIT_STD, rng)?;
        let reduce = normal_init(vec![NUM_EDGES, m], ALPHA_INIT_STD, rng)?;
        Self::from_tensors(mask, normal, reduce)
    }

    pub fn from_rows(mask: OperatorMask, normal: &[Vec<f64>], reduce: &[Vec<f64>]) -> Result<Self> {
        let to_tensor = |rows: &[Vec<f64>], what: &str| -> Result<Tensor<T>> {
            if rows.len() != NUM_EDGES || rows.iter().any(|r| r.len() != mask.len()) {
                return Err(Error::InvalidShape(format!(
                    "{what} coefficients must be {NUM_EDGES}x{}",
                    mask.len()
                )));
            }
            Tensor::from_vec(
                [NUM_EDGES, mask.len()],
                rows.iter().flatten().map(|&v| T::lit(v)).collect(),
            )
        };
        let normal = to_tensor(normal, "normal")?;
        let reduce = to_tensor(reduce, "reduce")?;
        Self::from_tensors(mask, normal, reduce)
    }

    pub fn from_tensors(mask: OperatorMask, normal: Tensor<T>, reduce: Tensor<T>) -> Result<Self> {
        for t in [&normal, &reduce] {
            if t.dims() != [NUM_EDGES, mask.len()] {
                return Err(Error::InvalidShape(format!(
                    "coefficient matrix {:?}, expected [{NUM_EDGES}, {}]",
                    t.dims(),
                    mask.len()
                )));
            }
            if !t.is_finite() {
                return Err(Error::InvalidArgument("non-finite architecture coefficient".into()));
            }
        }
        let mut store = ParamStore::new();
        store.insert(ALPHA_NORMAL, normal)?;
        store.insert(ALPHA_REDUCE, reduce)?;
        Ok(AlphaParams { mask, store })
    }

    pub fn mask(&self) -> &OperatorMask {
        &self.mask
    }

    pub fn matrix(&self, cell: CellKind) -> &Tensor<T> {
        let name = match cell {
            CellKind::Normal => ALPHA_NORMAL,
            CellKind::Reduce => ALPHA_REDUCE,
        };
        self.store.value(name).expect("both matrices are always present")
    }

    pub fn row(&self, cell: CellKind, row: usize) -> &[T] {
        let m = self.mask.len();
        &self.matrix(cell).data()[row * m..(row + 1) * m]
    }

    /// Coefficient matrix as nested `f64` rows.
    pub fn rows_f64(&self, cell: CellKind) -> Vec<Vec<f64>> {
        (0..NUM_EDGES)
            .map(|r| self.row(cell, r).iter().map(|v| v.to_f64_lossy()).collect())
            .collect()
    }

    /// Softmax coefficients for every edge row of one cell kind.
    pub fn coefficients(&self, cell: CellKind) -> Result<Vec<Vec<T>>> {
        (0..NUM_EDGES)
            .map(|r| softmax_coefficients(self.row(cell, r)))
            .collect()
    }

    /// Binds both matrices on `tape` and returns their row-wise softmax.
    pub fn bind<'a>(&'a self, tape: &'a Tape<T>) -> Result<BoundAlphas<'a, T>> {
        Self::bound(Frame::new(tape, &self.store))
    }

    /// Like [`AlphaParams::bind`] but without gradients for the coefficients.
    pub fn bind_frozen<'a>(&'a self, tape: &'a Tape<T>) -> Result<BoundAlphas<'a, T>> {
        Self::bound(Frame::frozen(tape, &self.store))
    }

    fn bound(frame: Frame<'_, T>) -> Result<BoundAlphas<'_, T>> {
        let tape = frame.tape();
        let normal = tape.softmax(frame.param(ALPHA_NORMAL)?, 1)?;
        let reduce = tape.softmax(frame.param(ALPHA_REDUCE)?, 1)?;
        Ok(BoundAlphas { frame, normal, reduce })
    }
}

/// Coefficients attached to a tape for one forward pass.
pub struct BoundAlphas<'a, T: Real> {
    pub frame: Frame<'a, T>,
    pub normal: Var,
    pub reduce: Var,
}

impl<T: Real> BoundAlphas<'_, T> {
    pub fn coefficients(&self, cell: CellKind) -> Var {
        match cell {
            CellKind::Normal => self.normal,
            CellKind::Reduce => self.reduce,
        }
    }
}

/// Depthwise `k×k` convolution (groups = channels) followed by a pointwise
/// `1×1` convolution. Parameters: `{prefix}.dw` and `{prefix}.pw`.
pub fn separable_conv<T: Real>(frame: &Frame<'_, T>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let tape = frame.tape();
    let dw = frame.param(&format!("{prefix}.dw"))?;
    let pw = frame.param(&format!("{prefix}.pw"))?;
    let channels = tape.value(dw).dims()[0];
    let y = tape.conv2d(x, dw, None, Conv2dOptions::default().stride(stride).groups(channels))?;
    tape.conv2d(y, pw, None, Conv2dOptions::default())
}

/// Rate-2 dilated convolution with same padding. Parameter: `{prefix}.conv`.
pub fn atrous_conv<T: Real>(frame: &Frame<'_, T>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = frame.param(&format!("{prefix}.conv"))?;
    frame.tape().conv2d(
        x,
        w,
        None,
        Conv2dOptions::default()
            .stride(stride)
            .dilation(2)
            .padding(Padding::Same),
    )
}

/// Residual convolution triplet: relu → conv → batch norm, plus the input
/// when the shapes allow it (stride 1 and equal channel counts).
#[derive(Clone, Debug)]
pub struct ConvTriplet {
    pub prefix: String,
    pub kind: OperatorKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub affine: bool,
}

impl ConvTriplet {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: impl Into<String>,
        kind: OperatorKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        affine: bool,
    ) -> Result<Self> {
        let prefix = prefix.into();
        let k = kind
            .kernel_size()
            .filter(|_| kind.is_conv())
            .ok_or_else(|| Error::InvalidArgument(format!("{kind} is not a convolution")))?;
        if kind.is_atrous() {
            store.add_conv(&format!("{prefix}.conv"), [out_channels, in_channels, k, k], rng)?;
        } else {
            store.add_conv(&format!("{prefix}.dw"), [in_channels, 1, k, k], rng)?;
            store.add_conv(&format!("{prefix}.pw"), [out_channels, in_channels, 1, 1], rng)?;
        }
        store.add_batch_norm(&format!("{prefix}.bn"), out_channels, affine)?;
        Ok(ConvTriplet {
            prefix,
            kind,
            in_channels,
            out_channels,
            stride,
            affine,
        })
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn forward<T: Real>(&self, frame: &Frame<'_, T>, x: Var) -> Result<Var> {
        let tape = frame.tape();
        let h = tape.relu(x)?;
        let h = if self.kind.is_atrous() {
            atrous_conv(frame, &self.prefix, h, self.stride)?
        } else {
            separable_conv(frame, &self.prefix, h, self.stride)?
        };
        let h = frame.batch_norm(&format!("{}.bn", self.prefix), h, self.affine)?;
        if self.has_residual() {
            tape.add(h, x)
        } else {
            Ok(h)
        }
    }
}

/// One concrete operator instance on an edge.
#[derive(Clone, Debug)]
pub enum Candidate {
    Triplet(ConvTriplet),
    AvgPool {
        stride: usize,
    },
    MaxPool {
        stride: usize,
    },
    Identity,
    /// Skip across a stride-2 edge: 1×1 stride-2 convolution + batch norm.
    StridedSkip {
        prefix: String,
        affine: bool,
    },
}

impl Candidate {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        kind: OperatorKind,
        channels: usize,
        stride: usize,
        affine: bool,
    ) -> Result<Self> {
        Ok(match kind {
            k if k.is_conv() => Candidate::Triplet(ConvTriplet::new(
                store, rng, prefix, k, channels, channels, stride, affine,
            )?),
            OperatorKind::AvgPool3 => Candidate::AvgPool { stride },
            OperatorKind::MaxPool3 => Candidate::MaxPool { stride },
            OperatorKind::Skip if stride == 1 => Candidate::Identity,
            OperatorKind::Skip => {
                store.add_conv(&format!("{prefix}.conv"), [channels, channels, 1, 1], rng)?;
                store.add_batch_norm(&format!("{prefix}.bn"), channels, affine)?;
                Candidate::StridedSkip {
                    prefix: prefix.to_string(),
                    affine,
                }
            }
            _ => unreachable!("all operator kinds covered"),
        })
    }

    pub fn forward<T: Real>(&self, frame: &Frame<'_, T>, x: Var) -> Result<Var> {
        let tape = frame.tape();
        match self {
            Candidate::Triplet(t) => t.forward(frame, x),
            Candidate::AvgPool { stride } => tape.avg_pool2d(x, 3, *stride),
            Candidate::MaxPool { stride } => tape.max_pool2d(x, 3, *stride),
            Candidate::Identity => Ok(x),
            Candidate::StridedSkip { prefix, affine } => {
                let w = frame.param(&format!("{prefix}.conv"))?;
                let y = tape.conv2d(x, w, None, Conv2dOptions::default().stride(2))?;
                frame.batch_norm(&format!("{prefix}.bn"), y, *affine)
            }
        }
    }
}

/// Every active candidate on one edge, evaluated and mixed by a coefficient row.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub id: EdgeId,
    pub prefix: String,
    pub candidates: Vec<(OperatorKind, Candidate)>,
}

impl MixedEdge {
    /// Registers the candidates' parameters under `prefix.<op name>` and
    /// checks on a probe input that all candidates agree on output shape.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        id: EdgeId,
        channels: usize,
        mask: &OperatorMask,
        affine: bool,
    ) -> Result<Self> {
        let candidates = mask
            .kinds()
            .iter()
            .map(|&kind| {
                let c = Candidate::new(
                    store,
                    rng,
                    &format!("{prefix}.{}", kind.name()),
                    kind,
                    channels,
                    id.stride(),
                    affine,
                )?;
                Ok((kind, c))
            })
            .collect::<Result<Vec<_>>>()?;
        let edge = MixedEdge {
            id,
            prefix: prefix.to_string(),
            candidates,
        };
        edge.probe_shapes(store, channels)?;
        Ok(edge)
    }

    fn probe_shapes<T: Real>(&self, store: &ParamStore<T>, channels: usize) -> Result<()> {
        let tape = Tape::new();
        let frame = Frame::with_prefix(&tape, store, &self.prefix);
        let x = tape.constant(Tensor::from_vec(
            [2, channels, 8, 8],
            (0..2 * channels * 64)
                .map(|i| T::lit(((i * 7919) % 13) as f64 / 13.0))
                .collect(),
        )?);
        let mut expected = None;
        for (kind, c) in &self.candidates {
            let shape = tape.shape(c.forward(&frame, x)?);
            match &expected {
                None => expected = Some(shape),
                Some(e) if *e != shape => {
                    return Err(Error::Invariant(format!(
                        "candidate {kind} on {:?} produces {shape:?}, others {e:?}",
                        self.id
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// `Σ_o c_o · o(x)` with `c` read from row `row` of `coefficients`.
    pub fn forward<T: Real>(&self, frame: &Frame<'_, T>, x: Var, coefficients: Var, row: usize) -> Result<Var> {
        let outputs = self
            .candidates
            .iter()
            .map(|(_, c)| c.forward(frame, x))
            .collect::<Result<Vec<_>>>()?;
        let shape = frame.tape().shape(outputs[0]);
        if outputs.iter().any(|&o| frame.tape().shape(o) != shape) {
            return Err(Error::Invariant(format!("candidate shapes disagree on {:?}", self.id)));
        }
        frame.tape().weighted_sum(&outputs, coefficients, row)
    }
}

/// A cell whose every edge is a [`MixedEdge`].
#[derive(Clone, Debug)]
pub struct RelaxedCell {
    pub kind: CellKind,
    pub channels: usize,
    pub edges: Vec<MixedEdge>,
}

impl RelaxedCell {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        kind: CellKind,
        channels: usize,
        mask: &OperatorMask,
        affine: bool,
    ) -> Result<Self> {
        let edges = cell_edges(kind)
            .map(|id| {
                MixedEdge::new(
                    store,
                    rng,
                    &format!("{prefix}.edge{:02}", id.row()),
                    id,
                    channels,
                    mask,
                    affine,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RelaxedCell { kind, channels, edges })
    }

    /// Node `i` sums its mixed edges over all sources `j < 2 + i`; the cell
    /// output concatenates the four nodes along channels.
    pub fn forward<T: Real>(&self, frame: &Frame<'_, T>, prev_prev: Var, prev: Var, coefficients: Var) -> Result<Var> {
        let tape = frame.tape();
        let mut states = vec![prev_prev, prev];
        for node in 0..NUM_NODES {
            let terms = (0..node + 2)
                .map(|source| {
                    let edge = &self.edges[edge_row(node, source)];
                    edge.forward(frame, states[source], coefficients, edge.id.row())
                })
                .collect::<Result<Vec<_>>>()?;
            states.push(tape.add_n(&terms)?);
        }
        tape.concat_channels(&states[2..])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn operator_names_round_trip() {
        for k in OperatorKind::ALL {
            assert_eq!(k.name().parse::<OperatorKind>().unwrap(), k);
        }
        assert!("zero".parse::<OperatorKind>().is_err());
        assert_eq!(OperatorKind::ALL.len(), 7);
    }

    #[test]
    fn edge_layout() {
        assert_eq!(cell_edges(CellKind::Normal).count(), NUM_EDGES);
        for (row, e) in cell_edges(CellKind::Reduce).enumerate() {
            assert_eq!(e.row(), row);
            assert!(e.source < e.node + 2);
            assert_eq!(e.stride(), if e.source < 2 { 2 } else { 1 });
        }
        assert!(EdgeId::new(CellKind::Normal, 0, 2).is_err());
    }

    #[test]
    fn masks() {
        let m = OperatorMask::atrous_free();
        assert_eq!(m.len(), 5);
        assert!(m.kinds().iter().all(|k| !k.is_atrous()));
        let bad: std::result::Result<OperatorMask, _> = serde_json::from_str(r#"["skip","sep_conv_3x3"]"#);
        assert!(bad.is_err());
    }

    #[test]
    fn softmax_row_checks() {
        let c = softmax_coefficients(&[0.0f64; 7]).unwrap();
        assert!(c.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        assert!(softmax_coefficients(&[0.0, f64::NAN]).is_err());
        let big = softmax_coefficients(&[1000.0f64, 0.0]).unwrap();
        assert!(big[0] > 0.999 && big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn alpha_init_is_small() {
        let a = AlphaParams::<f64>::random(OperatorMask::full(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.matrix(CellKind::Reduce).dims(), &[14, 7]);
        assert!(a.matrix(CellKind::Normal).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn reduce_cell_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mask = OperatorMask::full();
        let cell = RelaxedCell::new(&mut store, &mut rng, "c", CellKind::Reduce, 2, &mask, false).unwrap();
        let alphas = AlphaParams::<f64>::random(mask, &mut rng).unwrap();
        let tape = Tape::new();
        let frame = Frame::new(&tape, &store);
        let bound = alphas.bind(&tape).unwrap();
        let x = tape.constant(Tensor::full([2, 2, 6, 6], 0.5).unwrap());
        let y = cell.forward(&frame, x, x, bound.reduce).unwrap();
        assert_eq!(tape.value(y).dims(), &[2, 8, 3, 3]);
    }
}
