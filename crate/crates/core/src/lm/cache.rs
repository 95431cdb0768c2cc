use crate::error::{EspError, Result};

/// Per-layer key/value store addressed by slot (insertion order).
///
/// `slot_to_position` is the authoritative position record; after compaction
/// positions need not be contiguous. Keys are stored post-rotary.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    dim: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    positions: Vec<u32>,
}

impl KvCache {
    pub fn new(num_layers: usize, dim: usize) -> Self {
        KvCache {
            dim,
            keys: vec![Vec::new(); num_layers],
            values: vec![Vec::new(); num_layers],
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slot_to_position(&self) -> &[u32] {
        &self.positions
    }

    pub fn key(&self, layer: usize, slot: usize) -> &[f32] {
        &self.keys[layer][slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn value(&self, layer: usize, slot: usize) -> &[f32] {
        &self.values[layer][slot * self.dim..(slot + 1) * self.dim]
    }

    pub(crate) fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub(crate) fn layer_values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    pub(crate) fn push_positions(&mut self, positions: &[u32]) {
        self.positions.extend_from_slice(positions);
    }

    pub(crate) fn push_layer(&mut self, layer: usize, keys: &[f32], values: &[f32]) {
        self.keys[layer].extend_from_slice(keys);
        self.values[layer].extend_from_slice(values);
    }

    /// Keep exactly `keep` (strictly increasing slot indices), in order.
    pub fn compact(&mut self, keep: &[usize]) -> Result<()> {
        let len = self.len();
        for (i, &s) in keep.iter().enumerate() {
            if s >= len {
                return Err(EspError::InvalidSlots(format!(
                    "slot {s} out of range for cache of length {len}"
                )));
            }
            if i > 0 && keep[i - 1] >= s {
                return Err(EspError::InvalidSlots(format!(
                    "slots not strictly increasing at index {i} ({} then {s})",
                    keep[i - 1]
                )));
            }
        }
        // Gather in place: keep[i] >= i, so reads never see overwritten data.
        let d = self.dim;
        for layer in 0..self.keys.len() {
            for (dst, &src) in keep.iter().enumerate() {
                if dst != src {
                    self.keys[layer].copy_within(src * d..(src + 1) * d, dst * d);
                    self.values[layer].copy_within(src * d..(src + 1) * d, dst * d);
                }
            }
            self.keys[layer].truncate(keep.len() * d);
            self.values[layer].truncate(keep.len() * d);
        }
        for (dst, &src) in keep.iter().enumerate() {
            self.positions[dst] = self.positions[src];
        }
        self.positions.truncate(keep.len());
        Ok(())
    }

    /// Non-mutating form of [`KvCache::compact`].
    pub fn compacted(&self, keep: &[usize]) -> Result<KvCache> {
        let mut out = self.clone();
        out.compact(keep)?;
        Ok(out)
    }

    /// Drop every slot at or beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len() {
            return;
        }
        for layer in 0..self.keys.len() {
            self.keys[layer].truncate(len * self.dim);
            self.values[layer].truncate(len * self.dim);
        }
        self.positions.truncate(len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(n: usize) -> KvCache {
        let mut c = KvCache::new(2, 3);
        let pos: Vec<u32> = (0..n as u32).map(|p| p * 10).collect();
        c.push_positions(&pos);
        for layer in 0..2 {
            let k: Vec<f32> = (0..n * 3).map(|i| (layer * 1000 + i) as f32).collect();
            let v: Vec<f32> = k.iter().map(|x| -x).collect();
            c.push_layer(layer, &k, &v);
        }
        c
    }

    #[test]
    fn keep_all_is_identity() {
        let c = filled(3);
        assert_eq!(c.compacted(&[0, 1, 2]).unwrap(), c);
    }

    #[test]
    fn keep_none_empties() {
        let c = filled(3).compacted(&[]).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.layer_keys(1).len(), 0);
    }

    #[test]
    fn gather_semantics() {
        let c = filled(3).compacted(&[0, 2]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.slot_to_position(), &[0, 20]);
        assert_eq!(c.key(1, 1), &[1006.0, 1007.0, 1008.0]);
        assert_eq!(c.value(0, 1), &[-6.0, -7.0, -8.0]);
    }

    #[test]
    fn rejects_bad_slots() {
        let c = filled(3);
        assert!(c.compacted(&[3]).is_err());
        assert!(c.compacted(&[1, 1]).is_err());
        assert!(c.compacted(&[2, 0]).is_err());
    }
}
