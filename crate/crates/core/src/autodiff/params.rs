use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::tensor::Tensor;
use super::AutodiffError;

/// Magic prefix of a serialized [`ParamSet`].
pub const PARAMS_MAGIC: &[u8; 8] = b"SCLRPS01";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self { value, grad: Tensor::zeros(&shape), m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) }
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.v
    }
}

/// Named parameter tensors with gradient accumulators and Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.entries.insert(name.to_string(), ParamEntry::new(value));
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.grad)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Number of Adam steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<(), AutodiffError> {
        let entry = self.entries.get_mut(name).ok_or_else(|| AutodiffError::UnknownParam { name: name.to_string() })?;
        if entry.grad.shape() != g.shape() {
            return Err(AutodiffError::Shape {
                node: usize::MAX,
                op: "param".into(),
                detail: format!("gradient {:?} for '{name}' of shape {:?}", g.shape(), entry.grad.shape()),
            });
        }
        entry.grad.add_assign(g);
        Ok(())
    }

    /// Copy of the values only, with fresh gradient and optimizer state.
    pub fn values_only(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, e) in &self.entries {
            out.insert(name, e.value.clone());
        }
        out
    }

    /// Bit-exact equality of parameter values (gradients and moments ignored).
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// FNV-1a over names, shapes and value bits. Stable across runs and platforms.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, e) in &self.entries {
            feed(name.as_bytes());
            for &d in e.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// `max |a - b|` over all values; `None` when the sets are not shape-compatible.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Option<f64> {
        if self.entries.len() != other.entries.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for ((ka, a), (kb, b)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return None;
            }
            worst = worst.max(a.value.max_abs_diff(&b.value)?);
        }
        Some(worst)
    }

    /// Writes the values in the `SCLRPS01` record format.
    pub fn write_to<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_records(out, self.entries.iter().map(|(k, e)| (k.as_str(), &e.value)))
    }

    pub fn read_from<R: Read>(input: R) -> Result<ParamSet, AutodiffError> {
        let mut set = ParamSet::new();
        for (name, value) in read_records(input)? {
            set.insert(&name, value);
        }
        Ok(set)
    }

    /// Serializes Adam moments as `<name>/m` and `<name>/v` records.
    pub fn write_optimizer_state<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut records: Vec<(String, &Tensor)> = Vec::new();
        for (k, e) in &self.entries {
            records.push((format!("{k}/m"), &e.m));
            records.push((format!("{k}/v"), &e.v));
        }
        write_records(out, records.iter().map(|(k, t)| (k.as_str(), *t)))
    }

    /// Restores moments written by [`write_optimizer_state`](Self::write_optimizer_state).
    pub fn read_optimizer_state<R: Read>(&mut self, input: R, step: u64) -> Result<(), AutodiffError> {
        let mut found = 0;
        for (name, t) in read_records(input)? {
            let (base, which) =
                name.rsplit_once('/').ok_or_else(|| AutodiffError::Format(format!("bad optimizer record '{name}'")))?;
            let entry =
                self.entries.get_mut(base).ok_or_else(|| AutodiffError::UnknownParam { name: base.to_string() })?;
            if t.shape() != entry.value.shape() {
                return Err(AutodiffError::Format(format!("moment shape mismatch for '{base}'")));
            }
            match which {
                "m" => entry.m = t,
                "v" => entry.v = t,
                _ => return Err(AutodiffError::Format(format!("bad optimizer record '{name}'"))),
            }
            found += 1;
        }
        if found != 2 * self.entries.len() {
            return Err(AutodiffError::Format(format!(
                "optimizer state has {found} records, expected {}",
                2 * self.entries.len()
            )));
        }
        self.step = step;
        Ok(())
    }
}

fn write_records<'a, W: Write>(
    mut out: W,
    records: impl Iterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    out.write_all(PARAMS_MAGIC)?;
    for (name, t) in records {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_records<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| AutodiffError::Format(e.to_string()))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != PARAMS_MAGIC {
        return Err(AutodiffError::Format("bad magic, expected SCLRPS01".into()));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u64()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| AutodiffError::Format("parameter name is not UTF-8".into()))?;
        let rank = cur.u64()? as usize;
        if rank > super::tensor::MAX_RANK {
            return Err(AutodiffError::Format(format!("'{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| AutodiffError::Format("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| AutodiffError::Format(format!("'{name}': {e}")))?;
        records.push((name, t));
    }
    Ok(records)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        if self.pos + n > self.bytes.len() {
            return Err(AutodiffError::Format(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, AutodiffError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
