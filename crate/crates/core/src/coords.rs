//! Integer coordinates, the coordinate hash map and the sparse tensor.
//!
//! The coordinate map is an open-addressing table with robin-hood
//! displacement:
//!
//!   capacity  : power of two, at least 16
//!   load      : grows (x2) before occupancy exceeds 4/5 of capacity
//!   probe     : linear, slot = (hash + i) & (capacity - 1)
//!   placement : an entry that has probed further than the resident steals
//!               the slot, and the resident continues probing
//!   lookup    : stops at an empty slot or a resident closer to home than
//!               the probe distance
//!
//! Coordinates are stored densely by row index, so the table slots hold only
//! `(row, probe distance, hash tag)`. Row indices are `0..len` in insertion
//! order and are never reused (no deletion).
//!
//! Hash: each component (as its u32 bit pattern) is xor-ed into the state
//! and mixed by a multiply-shift step, left to right, followed by the
//! 64-bit murmur finalizer. The hash is fixed; table layout is therefore a
//! pure function of the insertion sequence.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

use crate::binio::*;
use crate::error::{Error, Result};

const EMPTY: u32 = u32::MAX;
const MIN_CAPACITY: usize = 16;

/// Hash of an integer coordinate.
pub fn hash_coordinate(c: &[i32]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &v in c {
        h = (h ^ u64::from(v as u32)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 29;
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    row: u32,
    dist: u32,
    tag: u32,
}

const VACANT: Slot = Slot { row: EMPTY, dist: 0, tag: 0 };

/// Coordinate -> row index map with dense row indices.
#[derive(Clone, Debug)]
pub struct CoordinateMap {
    dim: usize,
    coords: Vec<i32>,
    slots: Vec<Slot>,
}

impl PartialEq for CoordinateMap {
    /// Two maps are equal when they hold the same coordinates under the same
    /// row indices.
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.coords == other.coords
    }
}

impl CoordinateMap {
    pub fn new(dim: usize) -> Self {
        Self::with_capacity(dim, 0)
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        assert!(dim >= 1, "coordinate dimension must be positive");
        let cap = (n + n / 4 + 1).next_power_of_two().max(MIN_CAPACITY);
        Self {
            dim,
            coords: Vec::with_capacity(n * dim),
            slots: vec![VACANT; cap],
        }
    }

    /// Build a map from coordinates given row by row. Duplicates collapse onto
    /// the first occurrence.
    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [i32]>) -> Result<Self> {
        let mut map = Self::new(dim);
        for c in rows {
            map.insert(c)?;
        }
        Ok(map)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Coordinate stored at `row`.
    pub fn coordinate(&self, row: usize) -> &[i32] {
        &self.coords[row * self.dim..(row + 1) * self.dim]
    }

    /// All coordinates, row-major (`len * dim` entries).
    pub fn coordinates(&self) -> &[i32] {
        &self.coords
    }

    /// Rows in index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[i32])> + '_ {
        self.coords.chunks_exact(self.dim).enumerate()
    }

    fn check_dim(&self, c: &[i32]) -> Result<()> {
        if c.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: c.len() });
        }
        Ok(())
    }

    /// Insert a coordinate, returning its row index (existing or new).
    pub fn insert(&mut self, c: &[i32]) -> Result<usize> {
        self.check_dim(c)?;
        let h = hash_coordinate(c);
        if let Some(row) = self.find(c, h) {
            return Ok(row);
        }
        let row = self.len();
        if row >= EMPTY as usize {
            return Err(Error::Degenerate("coordinate map is full".into()));
        }
        if (row + 1) * 5 > self.slots.len() * 4 {
            self.grow();
        }
        self.coords.extend_from_slice(c);
        self.place(row as u32, h);
        Ok(row)
    }

    /// Row index of `c`, if present.
    pub fn lookup(&self, c: &[i32]) -> Result<Option<usize>> {
        self.check_dim(c)?;
        Ok(self.find(c, hash_coordinate(c)))
    }

    /// Lookup without the dimension check, for hot loops that already
    /// validated their inputs.
    #[inline]
    pub(crate) fn get(&self, c: &[i32]) -> Option<usize> {
        debug_assert_eq!(c.len(), self.dim);
        self.find(c, hash_coordinate(c))
    }

    #[inline]
    fn find(&self, c: &[i32], h: u64) -> Option<usize> {
        let mask = self.slots.len() - 1;
        let tag = (h >> 32) as u32;
        let mut pos = h as usize & mask;
        let mut dist = 0u32;
        loop {
            let s = self.slots[pos];
            if s.row == EMPTY || s.dist < dist {
                return None;
            }
            if s.tag == tag && self.coordinate(s.row as usize) == c {
                return Some(s.row as usize);
            }
            pos = (pos + 1) & mask;
            dist += 1;
        }
    }

    fn place(&mut self, row: u32, h: u64) {
        let mask = self.slots.len() - 1;
        let mut cur = Slot { row, dist: 0, tag: (h >> 32) as u32 };
        let mut pos = h as usize & mask;
        loop {
            let s = &mut self.slots[pos];
            if s.row == EMPTY {
                *s = cur;
                return;
            }
            if s.dist < cur.dist {
                std::mem::swap(s, &mut cur);
            }
            pos = (pos + 1) & mask;
            cur.dist += 1;
        }
    }

    fn grow(&mut self) {
        let cap = self.slots.len() * 2;
        self.slots = vec![VACANT; cap];
        for row in 0..self.len() {
            let h = hash_coordinate(self.coordinate(row));
            self.place(row as u32, h);
        }
    }

    /// Split the slot array into `n_blocks` contiguous blocks. Each block
    /// yields the rows whose slots fall inside it; together the blocks cover
    /// every entry exactly once.
    pub fn parallel_blocks(&self, n_blocks: usize) -> Vec<SlotBlock<'_>> {
        let n = n_blocks.max(1);
        let cap = self.slots.len();
        (0..n)
            .map(|b| SlotBlock { slots: &self.slots[b * cap / n..(b + 1) * cap / n] })
            .collect()
    }
}

/// A contiguous range of table slots; iterates the occupied rows in it.
#[derive(Clone, Debug)]
pub struct SlotBlock<'a> {
    slots: &'a [Slot],
}

impl<'a> IntoIterator for SlotBlock<'a> {
    type Item = usize;
    type IntoIter = SlotRows<'a>;

    fn into_iter(self) -> SlotRows<'a> {
        SlotRows { inner: self.slots.iter() }
    }
}

/// Iterator over the occupied rows of a [`SlotBlock`].
#[derive(Clone, Debug)]
pub struct SlotRows<'a> {
    inner: std::slice::Iter<'a, Slot>,
}

impl Iterator for SlotRows<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        self.inner.by_ref().find(|s| s.row != EMPTY).map(|s| s.row as usize)
    }
}

/// Coordinates with one feature row per coordinate.
///
/// When `batched` is set, axis 0 of every coordinate is an instance index:
/// it has stride 1, is never pooled and never receives kernel offsets.
#[derive(Clone, Debug)]
pub struct SparseTensor {
    map: Arc<CoordinateMap>,
    features: Array2<f64>,
    stride: Vec<i32>,
    batched: bool,
}

impl SparseTensor {
    pub fn new(map: Arc<CoordinateMap>, features: Array2<f64>, stride: Vec<i32>) -> Result<Self> {
        Self::build(map, features, stride, false)
    }

    pub fn new_batched(
        map: Arc<CoordinateMap>,
        features: Array2<f64>,
        stride: Vec<i32>,
    ) -> Result<Self> {
        Self::build(map, features, stride, true)
    }

    fn build(
        map: Arc<CoordinateMap>,
        features: Array2<f64>,
        stride: Vec<i32>,
        batched: bool,
    ) -> Result<Self> {
        if features.nrows() != map.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} coordinates",
                features.nrows(),
                map.len()
            )));
        }
        if stride.len() != map.dim() {
            return Err(Error::DimensionMismatch { expected: map.dim(), got: stride.len() });
        }
        if stride.iter().any(|&s| s < 1) {
            return Err(Error::Shape("tensor stride must be positive".into()));
        }
        if batched && (map.dim() < 2 || stride[0] != 1) {
            return Err(Error::Shape("batch axis needs dimension >= 2 and stride 1".into()));
        }
        for (row, c) in map.iter() {
            if c.iter().zip(&stride).any(|(&v, &s)| v.rem_euclid(s) != 0) {
                return Err(Error::Shape(format!(
                    "coordinate {c:?} (row {row}) is not a multiple of stride {stride:?}"
                )));
            }
        }
        Ok(Self { map, features, stride, batched })
    }

    /// Replace the features, keeping coordinates and stride.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::build(self.map.clone(), features, self.stride.clone(), self.batched)
    }

    pub fn map(&self) -> &Arc<CoordinateMap> {
        &self.map
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn into_features(self) -> Array2<f64> {
        self.features
    }

    pub fn stride(&self) -> &[i32] {
        &self.stride
    }

    pub fn is_batched(&self) -> bool {
        self.batched
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    /// Spatial dimension (excludes the batch axis).
    pub fn spatial_dim(&self) -> usize {
        self.map.dim() - usize::from(self.batched)
    }

    /// Stack unbatched tensors of equal dimension, stride and channel count
    /// into one batched tensor. Returns the row range of each instance.
    pub fn collate(tensors: &[SparseTensor]) -> Result<(SparseTensor, Vec<Range<usize>>)> {
        let first = tensors.first().ok_or(Error::Empty("no tensors to collate"))?;
        let dim = first.map.dim();
        let channels = first.channels();
        let total: usize = tensors.iter().map(SparseTensor::len).sum();
        let mut map = CoordinateMap::with_capacity(dim + 1, total);
        let mut features = Array2::zeros((total, channels));
        let mut ranges = Vec::with_capacity(tensors.len());
        let mut key = vec![0i32; dim + 1];
        for (b, t) in tensors.iter().enumerate() {
            if t.batched || t.map.dim() != dim || t.stride != first.stride || t.channels() != channels {
                return Err(Error::Shape("collated tensors must share layout".into()));
            }
            let start = map.len();
            key[0] = b as i32;
            for (row, c) in t.map.iter() {
                key[1..].copy_from_slice(c);
                let r = map.insert(&key)?;
                features.row_mut(r).assign(&t.features.row(row));
            }
            ranges.push(start..map.len());
        }
        let mut stride = Vec::with_capacity(dim + 1);
        stride.push(1);
        stride.extend_from_slice(&first.stride);
        let tensor = Self::new_batched(Arc::new(map), features, stride)?;
        Ok((tensor, ranges))
    }

    /// Binary layout (all little-endian):
    ///
    /// ```text
    /// magic    "HDST"
    /// version  u32 = 1
    /// dim      u32        coordinate dimension D (including a batch axis)
    /// channels u32        C
    /// rows     u64        N
    /// flags    u32        bit 0: batched
    /// stride   D x i32
    /// rows     N x (D x i32 coordinate, C x f64 features)
    /// ```
    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(b"HDST")?;
        write_u32(&mut w, 1)?;
        write_u32(&mut w, self.map.dim() as u32)?;
        write_u32(&mut w, self.channels() as u32)?;
        write_u64(&mut w, self.len() as u64)?;
        write_u32(&mut w, u32::from(self.batched))?;
        for &s in &self.stride {
            write_i32(&mut w, s)?;
        }
        for (row, c) in self.map.iter() {
            for &v in c {
                write_i32(&mut w, v)?;
            }
            for &f in self.features.row(row) {
                write_f64(&mut w, f)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        expect_magic(&mut r, b"HDST", "sparse tensor")?;
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported sparse tensor version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let rows = read_u64(&mut r)? as usize;
        let batched = read_u32(&mut r)? & 1 == 1;
        if dim == 0 {
            return Err(Error::Format("zero dimension".into()));
        }
        let stride = (0..dim).map(|_| read_i32(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut map = CoordinateMap::with_capacity(dim, rows);
        let mut features = Array2::zeros((rows, channels));
        let mut c = vec![0i32; dim];
        for i in 0..rows {
            for v in c.iter_mut() {
                *v = read_i32(&mut r)?;
            }
            if map.insert(&c)? != i {
                return Err(Error::Format(format!("duplicate coordinate at row {i}")));
            }
            for f in features.row_mut(i) {
                *f = read_f64(&mut r)?;
            }
        }
        Self::build(Arc::new(map), features, stride, batched)
    }

    /// CSV form: two `#` header lines, a column header, then one row per
    /// coordinate (`D` integers followed by `C` floats).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let dim = self.map.dim();
        writeln!(w, "# hdconv sparse tensor v1")?;
        let stride: Vec<String> = self.stride.iter().map(i32::to_string).collect();
        writeln!(
            w,
            "# dim={dim},channels={},rows={},stride={},batched={}",
            self.channels(),
            self.len(),
            stride.join(";"),
            u8::from(self.batched)
        )?;
        let mut cols: Vec<String> = (0..dim).map(|d| format!("c{d}")).collect();
        cols.extend((0..self.channels()).map(|c| format!("f{c}")));
        writeln!(w, "{}", cols.join(","))?;
        for (row, c) in self.map.iter() {
            let mut fields: Vec<String> = c.iter().map(i32::to_string).collect();
            fields.extend(self.features.row(row).iter().map(f64::to_string));
            writeln!(w, "{}", fields.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| Error::Format("truncated csv".into()))?.map_err(Error::from)
        };
        let _title = next()?;
        let fields = parse_header_fields(&next()?);
        let dim: usize = parse_num(header_value(&fields, "dim")?, "dim")?;
        let channels: usize = parse_num(header_value(&fields, "channels")?, "channels")?;
        let rows: usize = parse_num(header_value(&fields, "rows")?, "rows")?;
        let batched = header_value(&fields, "batched")? == "1";
        let stride = header_value(&fields, "stride")?
            .split(';')
            .map(|s| parse_num::<i32>(s, "stride"))
            .collect::<Result<Vec<_>>>()?;
        let _columns = next()?;
        let mut map = CoordinateMap::with_capacity(dim.max(1), rows);
        let mut features = Array2::zeros((rows, channels));
        for i in 0..rows {
            let line = next()?;
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != dim + channels {
                return Err(Error::Format(format!("row {i}: expected {} fields", dim + channels)));
            }
            let c = parts[..dim]
                .iter()
                .map(|s| parse_num::<i32>(s, "coordinate"))
                .collect::<Result<Vec<_>>>()?;
            if map.insert(&c)? != i {
                return Err(Error::Format(format!("duplicate coordinate at row {i}")));
            }
            for (f, s) in features.row_mut(i).iter_mut().zip(&parts[dim..]) {
                *f = parse_num(s, "feature")?;
            }
        }
        Self::build(Arc::new(map), features, stride, batched)
    }
}

/// Output of [`quantize`]: the tensor and, for every input point, the row
/// its cell landed in.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub tensor: SparseTensor,
    pub provenance: Vec<usize>,
}

impl Quantized {
    /// Number of input points merged into each row.
    pub fn cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.tensor.len()];
        for &r in &self.provenance {
            counts[r] += 1;
        }
        counts
    }
}

/// Grid cell of a point: `floor(p / resolution)` per component.
pub fn quantize_point(p: &[f64], resolution: f64, out: &mut [i32]) -> Result<()> {
    for (o, &v) in out.iter_mut().zip(p) {
        let q = (v / resolution).floor();
        if !(q >= i32::MIN as f64 && q <= i32::MAX as f64) {
            return Err(Error::Degenerate(format!("cell index {q} overflows i32")));
        }
        *o = q as i32;
    }
    Ok(())
}

/// Quantize points onto the integer grid of the given resolution. Points that
/// share a cell are merged into one row carrying the mean of their features.
pub fn quantize(points: ArrayView2<f64>, resolution: f64, feats: ArrayView2<f64>) -> Result<Quantized> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::Config(format!("resolution must be positive, got {resolution}")));
    }
    if points.nrows() != feats.nrows() {
        return Err(Error::Shape(format!(
            "{} points but {} feature rows",
            points.nrows(),
            feats.nrows()
        )));
    }
    let dim = points.ncols();
    if dim == 0 {
        return Err(Error::Empty("points have zero dimensions"));
    }
    for (row, (p, f)) in points.outer_iter().zip(feats.outer_iter()).enumerate() {
        if p.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row });
        }
    }

    let channels = feats.ncols();
    let mut map = CoordinateMap::with_capacity(dim, points.nrows());
    let mut provenance = Vec::with_capacity(points.nrows());
    let mut cell = vec![0i32; dim];
    let mut buf = vec![0.0; dim];
    for p in points.outer_iter() {
        for (b, v) in buf.iter_mut().zip(p.iter()) {
            *b = *v;
        }
        quantize_point(&buf, resolution, &mut cell)?;
        provenance.push(map.insert(&cell)?);
    }

    // Neumaier-compensated sums keep the mean accurate for large cells.
    let n = map.len();
    let mut sum = Array2::<f64>::zeros((n, channels));
    let mut comp = Array2::<f64>::zeros((n, channels));
    let mut counts = vec![0usize; n];
    for (f, &r) in feats.outer_iter().zip(&provenance) {
        counts[r] += 1;
        for c in 0..channels {
            let s = sum[[r, c]];
            let v = f[c];
            let t = s + v;
            if s.abs() >= v.abs() {
                comp[[r, c]] += (s - t) + v;
            } else {
                comp[[r, c]] += (v - t) + s;
            }
            sum[[r, c]] = t;
        }
    }
    let mut features = sum + comp;
    for (mut row, &k) in features.outer_iter_mut().zip(&counts) {
        row /= k as f64;
    }
    let tensor = SparseTensor::new(Arc::new(map), features, vec![1; dim])?;
    Ok(Quantized { tensor, provenance })
}
