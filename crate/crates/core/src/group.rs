//! The cyclic group `C_n`, its representations and their actions.
//!
//! Pixel `(i, j)` of an `H x W` map sits at the continuous coordinate
//! `(j - (W-1)/2, (H-1)/2 - i)`: `x` grows to the right, `y` grows upwards and
//! the origin is the image centre. With this convention a rotation by a
//! multiple of 90 degrees permutes pixel centres of any square grid exactly.

use crate::{Error, Result, Scalar};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

/// An element `Rot_{2 pi index / n}` of `C_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupElement {
    n: usize,
    index: usize,
}

impl GroupElement {
    /// Builds `index mod n` in `C_n`.
    pub fn new(n: usize, index: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("group order must be positive"));
        }
        Ok(Self { n, index: index % n })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, 0).expect("positive order")
    }

    /// The generator, a rotation by `2 pi / n`.
    pub fn generator(n: usize) -> Self {
        Self::new(n, 1).expect("positive order")
    }

    /// All elements of `C_n` in index order.
    pub fn elements(n: usize) -> impl Iterator<Item = GroupElement> {
        (0..n).map(move |index| GroupElement { n, index })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn is_identity(&self) -> bool {
        self.index == 0
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        2.0 * PI * self.index as f64 / self.n as f64
    }

    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement> {
        self.check_order(other.n)?;
        Ok(GroupElement {
            n: self.n,
            index: (self.index + other.index) % self.n,
        })
    }

    pub fn inverse(&self) -> GroupElement {
        GroupElement {
            n: self.n,
            index: (self.n - self.index) % self.n,
        }
    }

    /// The planar rotation this element acts by, exact for quarter turns.
    pub fn rotation(&self) -> Rotation {
        if (self.index * 4) % self.n == 0 {
            Rotation::quarter_turns(self.index * 4 / self.n)
        } else {
            Rotation::continuous(self.angle())
        }
    }

    fn check_order(&self, n: usize) -> Result<()> {
        if self.n != n {
            return Err(Error::GroupOrderMismatch {
                expected: n,
                actual: self.n,
            });
        }
        Ok(())
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r^{} in C_{}", self.index, self.n)
    }
}

/// A planar rotation. Multiples of 90 degrees are tracked separately so that
/// they are applied with sign flips and swaps instead of `cos`/`sin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    angle: f64,
    cos: f64,
    sin: f64,
    quarter: Option<u8>,
}

impl Rotation {
    pub fn identity() -> Self {
        Self::quarter_turns(0)
    }

    pub fn quarter_turns(q: usize) -> Self {
        let q = (q % 4) as u8;
        let (cos, sin) = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][q as usize];
        Self {
            angle: q as f64 * FRAC_PI_2,
            cos,
            sin,
            quarter: Some(q),
        }
    }

    /// A rotation by `angle` radians; angles within `1e-12` of a multiple of
    /// 90 degrees snap to the exact quarter-turn form.
    pub fn from_angle(angle: f64) -> Self {
        let turns = angle / FRAC_PI_2;
        let nearest = turns.round();
        if (turns - nearest).abs() < 1e-12 {
            Self::quarter_turns(nearest.rem_euclid(4.0) as usize)
        } else {
            Self::continuous(angle)
        }
    }

    fn continuous(angle: f64) -> Self {
        Self {
            angle,
            cos: angle.cos(),
            sin: angle.sin(),
            quarter: None,
        }
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// `Some(q)` when this is a rotation by `q * 90` degrees.
    pub fn as_quarter_turns(&self) -> Option<usize> {
        self.quarter.map(usize::from)
    }

    pub fn inverse(&self) -> Self {
        match self.quarter {
            Some(q) => Self::quarter_turns((4 - q as usize) % 4),
            None => Self::continuous(-self.angle),
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        match self.quarter {
            Some(0) => (x, y),
            Some(1) => (-y, x),
            Some(2) => (-x, -y),
            Some(3) => (y, -x),
            _ => (self.cos * x - self.sin * y, self.sin * x + self.cos * y),
        }
    }

    pub fn cos(&self) -> f64 {
        self.cos
    }

    pub fn sin(&self) -> f64 {
        self.sin
    }
}

/// How a `C_n` representation block acts on its channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    /// `rho_0`: every element acts as the identity on one channel.
    Trivial,
    /// `rho_1`: 2x2 rotation matrices.
    Standard,
    /// `rho_reg`: cyclic permutation of `n` channels.
    Regular,
}

impl BlockKind {
    pub fn dim(&self, n: usize) -> usize {
        match self {
            BlockKind::Trivial => 1,
            BlockKind::Standard => 2,
            BlockKind::Regular => n,
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            BlockKind::Trivial => 0,
            BlockKind::Standard => 1,
            BlockKind::Regular => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BlockKind::Trivial),
            1 => Some(BlockKind::Standard),
            2 => Some(BlockKind::Regular),
            _ => None,
        }
    }
}

/// Row-major dense matrix of one block for one group element, exact for
/// quarter turns.
pub(crate) fn block_matrix(kind: BlockKind, g: &GroupElement) -> Vec<f64> {
    let n = g.order();
    match kind {
        BlockKind::Trivial => vec![1.0],
        BlockKind::Standard => {
            let r = g.rotation();
            vec![r.cos(), -r.sin(), r.sin(), r.cos()]
        }
        BlockKind::Regular => {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + (i + n - g.index()) % n] = 1.0;
            }
            m
        }
    }
}

/// A representation of `C_n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Representation {
    n: usize,
    kind: RepKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum RepKind {
    Trivial,
    Standard,
    Regular,
    DirectSum(Vec<Representation>),
}

impl Representation {
    pub fn trivial(n: usize) -> Self {
        Self { n, kind: RepKind::Trivial }
    }

    pub fn standard(n: usize) -> Self {
        Self { n, kind: RepKind::Standard }
    }

    pub fn regular(n: usize) -> Self {
        Self { n, kind: RepKind::Regular }
    }

    pub fn direct_sum(parts: Vec<Representation>) -> Result<Self> {
        let n = parts
            .first()
            .map(|p| p.n)
            .ok_or_else(|| Error::invalid("direct sum of zero representations"))?;
        if let Some(p) = parts.iter().find(|p| p.n != n) {
            return Err(Error::GroupOrderMismatch {
                expected: n,
                actual: p.n,
            });
        }
        Ok(Self {
            n,
            kind: RepKind::DirectSum(parts),
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> &RepKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            RepKind::Trivial => 1,
            RepKind::Standard => 2,
            RepKind::Regular => self.n,
            RepKind::DirectSum(parts) => parts.iter().map(Representation::dim).sum(),
        }
    }

    /// The leaf blocks of this representation, direct sums flattened.
    pub fn blocks(&self) -> Vec<BlockKind> {
        match &self.kind {
            RepKind::Trivial => vec![BlockKind::Trivial],
            RepKind::Standard => vec![BlockKind::Standard],
            RepKind::Regular => vec![BlockKind::Regular],
            RepKind::DirectSum(parts) => parts.iter().flat_map(Representation::blocks).collect(),
        }
    }

    /// `rho(g)` as a dense matrix; block diagonal for direct sums.
    pub fn matrix(&self, g: &GroupElement) -> Result<DMatrix<f64>> {
        g.check_order(self.n)?;
        FieldType::new(self.n, self.blocks())?.matrix(g)
    }
}

/// See [`Representation::matrix`].
pub fn rep_matrix(rep: &Representation, g: &GroupElement) -> Result<DMatrix<f64>> {
    rep.matrix(g)
}

/// Channel semantics of a feature map: an ordered list of representation
/// blocks of one group `C_n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldType {
    n: usize,
    blocks: Vec<BlockKind>,
}

impl FieldType {
    pub fn new(n: usize, blocks: Vec<BlockKind>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("group order must be positive"));
        }
        Ok(Self { n, blocks })
    }

    pub fn from_representation(rep: &Representation) -> Self {
        Self {
            n: rep.order(),
            blocks: rep.blocks(),
        }
    }

    pub fn trivial(n: usize, count: usize) -> Self {
        Self {
            n,
            blocks: vec![BlockKind::Trivial; count],
        }
    }

    pub fn regular(n: usize, count: usize) -> Self {
        Self {
            n,
            blocks: vec![BlockKind::Regular; count],
        }
    }

    pub fn standard(n: usize, count: usize) -> Self {
        Self {
            n,
            blocks: vec![BlockKind::Standard; count],
        }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[BlockKind] {
        &self.blocks
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim(self.n)).sum()
    }

    /// `(offset, kind)` of every block.
    pub fn block_offsets(&self) -> Vec<(usize, BlockKind)> {
        let mut offset = 0;
        self.blocks
            .iter()
            .map(|&b| {
                let o = offset;
                offset += b.dim(self.n);
                (o, b)
            })
            .collect()
    }

    pub fn concat(&self, other: &FieldType) -> Result<FieldType> {
        if self.n != other.n {
            return Err(Error::GroupOrderMismatch {
                expected: self.n,
                actual: other.n,
            });
        }
        let mut blocks = self.blocks.clone();
        blocks.extend_from_slice(&other.blocks);
        Ok(FieldType { n: self.n, blocks })
    }

    pub fn contains(&self, kind: BlockKind) -> bool {
        self.blocks.contains(&kind)
    }

    pub fn representation(&self) -> Result<Representation> {
        Representation::direct_sum(
            self.blocks
                .iter()
                .map(|b| match b {
                    BlockKind::Trivial => Representation::trivial(self.n),
                    BlockKind::Standard => Representation::standard(self.n),
                    BlockKind::Regular => Representation::regular(self.n),
                })
                .collect(),
        )
    }

    /// Block diagonal `rho(g)`.
    pub fn matrix(&self, g: &GroupElement) -> Result<DMatrix<f64>> {
        g.check_order(self.n)?;
        let d = self.total_dim();
        let mut m = DMatrix::zeros(d, d);
        for (offset, kind) in self.block_offsets() {
            let bd = kind.dim(self.n);
            let block = block_matrix(kind, g);
            for r in 0..bd {
                for c in 0..bd {
                    m[(offset + r, offset + c)] = block[r * bd + c];
                }
            }
        }
        Ok(m)
    }

    /// `rho(g) v`, blockwise.
    pub fn act_on_vector<T: Scalar>(&self, g: &GroupElement, v: &[T]) -> Result<Vec<T>> {
        g.check_order(self.n)?;
        if v.len() != self.total_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.total_dim(),
                actual: v.len(),
            });
        }
        let mut out = vec![T::zero(); v.len()];
        self.transform_channels(&ChannelAction::Group(*g), v, &mut out, 1)?;
        Ok(out)
    }

    /// Applies the channel action to `pixels` pixels stored channel-major
    /// (`src[c * pixels + p]`).
    fn transform_channels<T: Scalar>(
        &self,
        action: &ChannelAction,
        src: &[T],
        dst: &mut [T],
        pixels: usize,
    ) -> Result<()> {
        let n = self.n;
        for (offset, kind) in self.block_offsets() {
            let s = &src[offset * pixels..];
            let d = &mut dst[offset * pixels..];
            match kind {
                BlockKind::Trivial => d[..pixels].copy_from_slice(&s[..pixels]),
                BlockKind::Standard => {
                    let (c, sn) = match action {
                        ChannelAction::Group(g) => {
                            let r = g.rotation();
                            (r.cos(), r.sin())
                        }
                        ChannelAction::Angle(r) => (r.cos(), r.sin()),
                    };
                    let (c, sn) = (T::of(c), T::of(sn));
                    for p in 0..pixels {
                        let (x, y) = (s[p], s[pixels + p]);
                        d[p] = c * x - sn * y;
                        d[pixels + p] = sn * x + c * y;
                    }
                }
                BlockKind::Regular => {
                    let shift = match action {
                        ChannelAction::Group(g) => g.index(),
                        ChannelAction::Angle(r) => {
                            return Err(Error::Unsupported(format!(
                                "regular fields of C_{n} cannot be rotated by {} rad",
                                r.angle()
                            )))
                        }
                    };
                    for i in 0..n {
                        let from = (i + n - shift) % n;
                        d[i * pixels..(i + 1) * pixels]
                            .copy_from_slice(&s[from * pixels..(from + 1) * pixels]);
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn encode(&self) -> Vec<f64> {
        std::iter::once(self.n as f64)
            .chain(self.blocks.iter().map(|b| b.code() as f64))
            .collect()
    }

    pub(crate) fn decode(data: &[f64]) -> Option<FieldType> {
        let (&n, rest) = data.split_first()?;
        let blocks = rest
            .iter()
            .map(|&c| BlockKind::from_code(c as u8))
            .collect::<Option<Vec<_>>>()?;
        FieldType::new(n as usize, blocks).ok()
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        let mut iter = self.blocks.iter().peekable();
        while let Some(b) = iter.next() {
            let mut count = 1;
            while iter.peek() == Some(&b) {
                iter.next();
                count += 1;
            }
            let tag = match b {
                BlockKind::Trivial => "T",
                BlockKind::Standard => "S",
                BlockKind::Regular => "R",
            };
            parts.push(format!("{count}{tag}"));
        }
        write!(f, "C{}[{}]", self.n, parts.join("+"))
    }
}

enum ChannelAction {
    Group(GroupElement),
    Angle(Rotation),
}

/// An `H x W` grid of channel vectors carrying a [`FieldType`], stored
/// channel-major as `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64> {
    field: FieldType,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(field: FieldType, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = field.total_dim() * height * width;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            field,
            height,
            width,
            data,
        })
    }

    pub fn zeros(field: FieldType, height: usize, width: usize) -> Self {
        let len = field.total_dim() * height * width;
        Self {
            field,
            height,
            width,
            data: vec![T::zero(); len],
        }
    }

    /// A `1 x 1` feature map.
    pub fn vector(field: FieldType, data: Vec<T>) -> Result<Self> {
        Self::new(field, 1, 1, data)
    }

    pub fn field(&self) -> &FieldType {
        &self.field
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.field.total_dim()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            field: self.field.clone(),
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureMap<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `g v` for a vector (a `1 x 1` map) sitting at the origin.
pub fn act_on_vector<T: Scalar>(field: &FieldType, g: &GroupElement, v: &[T]) -> Result<Vec<T>> {
    field.act_on_vector(g, v)
}

/// `(gF)(x) = rho(g) F(rho_1(g)^-1 x)`. Quarter turns are exact pixel
/// permutations; other angles sample `F` bilinearly with zero fill.
pub fn act_on_feature_map<T: Scalar>(
    field: &FieldType,
    g: &GroupElement,
    map: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if field != &map.field {
        return Err(Error::FieldMismatch(format!(
            "action on {field} applied to a map of type {}",
            map.field
        )));
    }
    g.check_order(field.order())?;
    transform_map(map, &ChannelAction::Group(*g), g.rotation(), T::zero())
}

/// Rotates a map by an arbitrary angle. Only trivial and standard blocks have
/// a meaning for angles outside `C_n`; out-of-bounds samples take `fill`.
pub fn rotate_feature_map<T: Scalar>(
    map: &FeatureMap<T>,
    rotation: Rotation,
    fill: T,
) -> Result<FeatureMap<T>> {
    transform_map(map, &ChannelAction::Angle(rotation), rotation, fill)
}

fn transform_map<T: Scalar>(
    map: &FeatureMap<T>,
    action: &ChannelAction,
    rotation: Rotation,
    fill: T,
) -> Result<FeatureMap<T>> {
    if map.height != map.width {
        return Err(Error::NonSquare {
            height: map.height,
            width: map.width,
        });
    }
    let spatial = rotate_grid(&map.data, map.channels(), map.height, rotation, fill);
    let mut out = vec![T::zero(); spatial.len()];
    map.field
        .transform_channels(action, &spatial, &mut out, map.height * map.width)?;
    Ok(FeatureMap {
        field: map.field.clone(),
        height: map.height,
        width: map.width,
        data: out,
    })
}

/// Spatially rotates every channel of a channel-major `(c, s, s)` grid:
/// `out(p) = in(R^-1 p)`.
pub fn rotate_grid<T: Scalar>(
    data: &[T],
    channels: usize,
    size: usize,
    rotation: Rotation,
    fill: T,
) -> Vec<T> {
    let hw = size * size;
    debug_assert_eq!(data.len(), channels * hw);
    let mut out = vec![T::zero(); data.len()];
    let last = size - 1;
    if let Some(q) = rotation.as_quarter_turns() {
        for c in 0..channels {
            let src = &data[c * hw..(c + 1) * hw];
            let dst = &mut out[c * hw..(c + 1) * hw];
            for i in 0..size {
                for j in 0..size {
                    let (si, sj) = match q {
                        0 => (i, j),
                        1 => (j, last - i),
                        2 => (last - i, last - j),
                        _ => (last - j, i),
                    };
                    dst[i * size + j] = src[si * size + sj];
                }
            }
        }
        return out;
    }

    let centre = last as f64 / 2.0;
    let inv = rotation.inverse();
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 - centre, centre - i as f64);
            let (sx, sy) = inv.apply(x, y);
            let (fi, fj) = (centre - sy, sx + centre);
            let (i0, j0) = (fi.floor(), fj.floor());
            let (di, dj) = (fi - i0, fj - j0);
            let taps = [
                (i0, j0, (1.0 - di) * (1.0 - dj)),
                (i0, j0 + 1.0, (1.0 - di) * dj),
                (i0 + 1.0, j0, di * (1.0 - dj)),
                (i0 + 1.0, j0 + 1.0, di * dj),
            ];
            for c in 0..channels {
                let src = &data[c * hw..(c + 1) * hw];
                let mut acc = T::zero();
                for &(ti, tj, w) in &taps {
                    if w == 0.0 {
                        continue;
                    }
                    let v = if ti >= 0.0 && tj >= 0.0 && ti <= last as f64 && tj <= last as f64 {
                        src[ti as usize * size + tj as usize]
                    } else {
                        fill
                    };
                    acc += T::of(w) * v;
                }
                out[c * hw + i * size + j] = acc;
            }
        }
    }
    out
}
