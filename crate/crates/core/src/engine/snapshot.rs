//! Copies of the trainable parameter set, used for pipeline weight stashing.
//!
//! # Byte format
//!
//! All integers and scalars are little-endian.
//!
//! ```text
//! u64  version
//! u32  group count
//! per group:
//!   u32  layer        (1..=L for adapters, L + 1 for the head)
//!   u8   tag          (0 = W_down, 1 = W_up, 2 = head weight, 3 = head bias)
//!   u32  rows
//!   u32  cols
//!   u64  payload length in scalars (= rows * cols)
//!   f64  payload[length]
//! ```

use super::params::ModelParams;
use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupTag {
    AdapterDown,
    AdapterUp,
    HeadWeight,
    HeadBias,
}

impl GroupTag {
    fn code(self) -> u8 {
        match self {
            GroupTag::AdapterDown => 0,
            GroupTag::AdapterUp => 1,
            GroupTag::HeadWeight => 2,
            GroupTag::HeadBias => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => GroupTag::AdapterDown,
            1 => GroupTag::AdapterUp,
            2 => GroupTag::HeadWeight,
            3 => GroupTag::HeadBias,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotGroup {
    pub layer: u32,
    pub tag: GroupTag,
    pub rows: u32,
    pub cols: u32,
    pub data: Vec<f64>,
}

/// Every adapter plus the head, tagged with the version they were taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub version: u64,
    pub groups: Vec<SnapshotGroup>,
}

impl WeightSnapshot {
    pub fn scalar_count(&self) -> usize {
        self.groups.iter().map(|g| g.data.len()).sum()
    }

    /// Size under the given scalar width.
    pub fn byte_size(&self, scalar_bytes: usize) -> u64 {
        (self.scalar_count() * scalar_bytes) as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.groups.len() * 21 + self.scalar_count() * 8);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            out.extend_from_slice(&g.layer.to_le_bytes());
            out.push(g.tag.code());
            out.extend_from_slice(&g.rows.to_le_bytes());
            out.extend_from_slice(&g.cols.to_le_bytes());
            out.extend_from_slice(&(g.data.len() as u64).to_le_bytes());
            for v in &g.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        let mut r = Reader { bytes, pos: 0 };
        let version = u64::from_le_bytes(r.take()?);
        let count = u32::from_le_bytes(r.take()?);
        let mut groups = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let layer = u32::from_le_bytes(r.take()?);
            let [code] = r.take::<1>()?;
            let tag = GroupTag::from_code(code)
                .ok_or_else(|| EngineError::SnapshotDecode(format!("unknown group tag {code}")))?;
            let rows = u32::from_le_bytes(r.take()?);
            let cols = u32::from_le_bytes(r.take()?);
            let len = u64::from_le_bytes(r.take()?) as usize;
            if len != rows as usize * cols as usize {
                return Err(EngineError::SnapshotDecode(format!(
                    "group at layer {layer}: payload {len} does not match {rows}x{cols}"
                )));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(r.take()?));
            }
            groups.push(SnapshotGroup {
                layer,
                tag,
                rows,
                cols,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(EngineError::SnapshotDecode(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { version, groups })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], EngineError> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| EngineError::SnapshotDecode("unexpected end of stream".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice has length N"))
    }
}

pub fn snapshot_trainables(params: &ModelParams) -> WeightSnapshot {
    let n = params.spec.hidden_dim as u32;
    let m = params.spec.bottleneck_dim as u32;
    let c = params.spec.num_classes as u32;
    let mut groups = Vec::with_capacity(2 * params.adapters.len() + 2);
    for (i, a) in params.adapters.iter().enumerate() {
        let layer = i as u32 + 1;
        groups.push(SnapshotGroup {
            layer,
            tag: GroupTag::AdapterDown,
            rows: n,
            cols: m,
            data: a.down.clone(),
        });
        groups.push(SnapshotGroup {
            layer,
            tag: GroupTag::AdapterUp,
            rows: m,
            cols: n,
            data: a.up.clone(),
        });
    }
    let head_layer = params.adapters.len() as u32 + 1;
    groups.push(SnapshotGroup {
        layer: head_layer,
        tag: GroupTag::HeadWeight,
        rows: n,
        cols: c,
        data: params.head.weight.clone(),
    });
    groups.push(SnapshotGroup {
        layer: head_layer,
        tag: GroupTag::HeadBias,
        rows: 1,
        cols: c,
        data: params.head.bias.clone(),
    });
    WeightSnapshot {
        version: params.version,
        groups,
    }
}

/// Writes the snapshot back; the params take the snapshot's version tag.
pub fn restore_trainables(
    params: &mut ModelParams,
    snapshot: &WeightSnapshot,
) -> Result<(), EngineError> {
    let expected = snapshot_trainables(params);
    let shapes_match = expected.groups.len() == snapshot.groups.len()
        && expected.groups.iter().zip(&snapshot.groups).all(|(e, s)| {
            e.layer == s.layer
                && e.tag == s.tag
                && e.rows == s.rows
                && e.cols == s.cols
                && s.data.len() == e.data.len()
        });
    if !shapes_match {
        return Err(EngineError::SnapshotShapeMismatch(format!(
            "snapshot has {} groups ({} scalars), model expects {} groups ({} scalars)",
            snapshot.groups.len(),
            snapshot.scalar_count(),
            expected.groups.len(),
            expected.scalar_count()
        )));
    }
    for g in &snapshot.groups {
        let target = match g.tag {
            GroupTag::AdapterDown => &mut params.adapters[g.layer as usize - 1].down,
            GroupTag::AdapterUp => &mut params.adapters[g.layer as usize - 1].up,
            GroupTag::HeadWeight => &mut params.head.weight,
            GroupTag::HeadBias => &mut params.head.bias,
        };
        target.copy_from_slice(&g.data);
    }
    params.version = snapshot.version;
    Ok(())
}
