use crate::error::{Error, Result};
use crate::rng::fnv1a64;

/// Layout descriptor for one named parameter block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector with a matching gradient buffer and a named layout.
///
/// Offsets partition `[0, len)` in declaration order; the layout is what the
/// weight-file format serializes.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    layout: Vec<ParamEntry>,
}

impl ParamSet {
    /// Build a zero-initialized set from `(name, shape)` declarations.
    pub fn build(decls: &[(&str, Vec<usize>)]) -> Result<Self> {
        let mut layout = Vec::with_capacity(decls.len());
        let mut offset = 0usize;
        for (name, shape) in decls {
            if layout.iter().any(|e: &ParamEntry| e.name == *name) {
                return Err(Error::invalid(format!("duplicate parameter name {name}")));
            }
            let entry = ParamEntry { name: name.to_string(), shape: shape.clone(), offset };
            offset += entry.len();
            layout.push(entry);
        }
        Ok(ParamSet {
            values: vec![0.0; offset],
            grads: vec![0.0; offset],
            layout,
        })
    }

    /// Reassemble from parts (used by deserialization). Validates that the
    /// offsets partition the value vector without gaps or overlap.
    pub fn from_parts(values: Vec<f64>, layout: Vec<ParamEntry>) -> Result<Self> {
        let mut expected = 0usize;
        for entry in &layout {
            if entry.offset != expected {
                return Err(Error::Format {
                    what: "param layout",
                    msg: format!(
                        "entry {} at offset {} does not follow previous block (expected {})",
                        entry.name, entry.offset, expected
                    ),
                });
            }
            expected += entry.len();
        }
        if expected != values.len() {
            return Err(Error::Format {
                what: "param layout",
                msg: format!("layout covers {} values, payload has {}", expected, values.len()),
            });
        }
        let n = values.len();
        Ok(ParamSet { values, grads: vec![0.0; n], layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let e = self.entry(name)?;
        Ok(&self.values[e.offset..e.offset + e.len()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let e = self.entry(name)?.clone();
        Ok(&mut self.values[e.offset..e.offset + e.len()])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = 0.0;
        }
    }

    /// Content hash over the f64 bit patterns of the values. Used by the
    /// solver log to assert warm-start continuity across timesteps.
    pub fn value_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_partition() {
        let p = ParamSet::build(&[("w0", vec![2, 3]), ("b0", vec![3])]).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(p.entry("w0").unwrap().offset, 0);
        assert_eq!(p.entry("b0").unwrap().offset, 6);
        assert_eq!(p.values.len(), p.grads.len());
    }

    #[test]
    fn from_parts_rejects_gaps() {
        let layout = vec![
            ParamEntry { name: "a".into(), shape: vec![2], offset: 0 },
            ParamEntry { name: "b".into(), shape: vec![2], offset: 3 },
        ];
        assert!(ParamSet::from_parts(vec![0.0; 5], layout).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(ParamSet::build(&[("w", vec![1]), ("w", vec![1])]).is_err());
    }

    #[test]
    fn value_hash_tracks_content() {
        let mut p = ParamSet::build(&[("w", vec![4])]).unwrap();
        let h0 = p.value_hash();
        p.values[2] = 1.5;
        assert_ne!(h0, p.value_hash());
    }
}
