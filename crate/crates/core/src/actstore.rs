//! Activation storage: a dense image-by-unit matrix with a layer schema and
//! a compact binary file format.
//!
//! Convolutional layers are recorded as one value per channel (the spatial
//! maximum), fully connected layers as one value per unit, so a network with
//! layer sizes `c_1..c_L` yields a row of `sum(c_l)` floats per image.
//!
//! File format (ACTV v1), little-endian:
//!
//! ```text
//! magic   "ACTV" (4 bytes)
//! version 0x01   (1 byte)
//! hlen    u32    header byte length
//! header  UTF-8 JSON {"image_ids": [...], "layers": [{name, unit_count, kind}]}
//! payload f32 row-major matrix, rows = images, columns = flat units
//! ```

use std::collections::HashMap;
use std::io::Read as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTV_MAGIC: [u8; 4] = *b"ACTV";
pub const ACTV_VERSION: u8 = 1;

/// Layer role; conv channels are max-pooled to scalars when recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

/// One recorded layer: a name unique within the network and its unit count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchema {
    pub name: String,
    pub unit_count: usize,
    pub kind: LayerKind,
}

/// Identifies one unit both by (layer, offset) and by flat column index.
/// The two views are a bijection for a fixed schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitAddress {
    pub layer_index: usize,
    pub unit_index: usize,
    pub flat_index: usize,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    image_ids: Vec<String>,
    layers: Vec<LayerSchema>,
}

/// Dense activations for a set of images under one layer schema.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    image_ids: Vec<String>,
    layers: Vec<LayerSchema>,
    /// Row-major, `image_ids.len() * unit_count` values, all finite.
    values: Vec<f32>,
    unit_count: usize,
    row_index: HashMap<String, usize>,
    /// `layer_offsets[l]` is the flat index of layer `l`'s first unit; the
    /// final entry equals `unit_count`.
    layer_offsets: Vec<usize>,
}

fn validate_layers(layers: &[LayerSchema]) -> Result<(usize, Vec<usize>)> {
    if layers.is_empty() {
        return Err(Error::EmptyInput {
            what: "layer schema",
        });
    }
    let mut names = HashMap::new();
    let mut offsets = Vec::with_capacity(layers.len() + 1);
    let mut total = 0usize;
    for (i, layer) in layers.iter().enumerate() {
        if layer.unit_count == 0 {
            return Err(Error::InvalidInput(format!(
                "layer {:?} has zero units",
                layer.name
            )));
        }
        if names.insert(layer.name.clone(), i).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate layer name {:?}",
                layer.name
            )));
        }
        offsets.push(total);
        total += layer.unit_count;
    }
    offsets.push(total);
    Ok((total, offsets))
}

impl ActivationMatrix {
    pub fn new(
        image_ids: Vec<String>,
        layers: Vec<LayerSchema>,
        values: Vec<f32>,
    ) -> Result<ActivationMatrix> {
        let (unit_count, layer_offsets) = validate_layers(&layers)?;
        let expected = image_ids
            .len()
            .checked_mul(unit_count)
            .ok_or_else(|| Error::InvalidInput("activation matrix size overflows".into()))?;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "activation values",
                expected,
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!(
                    "activation row {} unit {}",
                    pos / unit_count,
                    pos % unit_count
                ),
            });
        }
        let mut row_index = HashMap::with_capacity(image_ids.len());
        for (i, id) in image_ids.iter().enumerate() {
            if row_index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateImageId { id: id.clone() });
            }
        }
        Ok(ActivationMatrix {
            image_ids,
            layers,
            values,
            unit_count,
            row_index,
            layer_offsets,
        })
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn layers(&self) -> &[LayerSchema] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Total flat units per row.
    pub fn unit_count(&self) -> usize {
        self.unit_count
    }

    /// Resolves a flat column index to its (layer, unit) address.
    pub fn address_of(&self, flat_index: usize) -> Result<UnitAddress> {
        if flat_index >= self.unit_count {
            return Err(Error::AddressOutOfRange {
                what: "flat unit index",
                index: flat_index,
                limit: self.unit_count,
            });
        }
        // partition_point finds the layer whose offset range contains flat_index.
        let layer_index = self.layer_offsets.partition_point(|&off| off <= flat_index) - 1;
        Ok(UnitAddress {
            layer_index,
            unit_index: flat_index - self.layer_offsets[layer_index],
            flat_index,
        })
    }

    /// Resolves (layer, unit) to a full address.
    pub fn address(&self, layer_index: usize, unit_index: usize) -> Result<UnitAddress> {
        if layer_index >= self.layers.len() {
            return Err(Error::AddressOutOfRange {
                what: "layer index",
                index: layer_index,
                limit: self.layers.len(),
            });
        }
        let layer = &self.layers[layer_index];
        if unit_index >= layer.unit_count {
            return Err(Error::AddressOutOfRange {
                what: "unit index",
                index: unit_index,
                limit: layer.unit_count,
            });
        }
        Ok(UnitAddress {
            layer_index,
            unit_index,
            flat_index: self.layer_offsets[layer_index] + unit_index,
        })
    }

    pub fn row(&self, id: &str) -> Result<&[f32]> {
        let &row = self
            .row_index
            .get(id)
            .ok_or_else(|| Error::UnknownImageId { id: id.into() })?;
        Ok(&self.values[row * self.unit_count..(row + 1) * self.unit_count])
    }

    /// Copies one unit's column in image order.
    pub fn column(&self, flat_index: usize) -> Result<Vec<f32>> {
        if flat_index >= self.unit_count {
            return Err(Error::AddressOutOfRange {
                what: "flat unit index",
                index: flat_index,
                limit: self.unit_count,
            });
        }
        Ok(self
            .values
            .chunks_exact(self.unit_count)
            .map(|row| row[flat_index])
            .collect())
    }

    /// Extracts the sub-matrix for `ids` in the given order. Unknown ids are
    /// an error.
    pub fn rows_for<S: AsRef<str>>(&self, ids: &[S]) -> Result<ActivationMatrix> {
        let mut values = Vec::with_capacity(ids.len() * self.unit_count);
        let mut image_ids = Vec::with_capacity(ids.len());
        for id in ids {
            values.extend_from_slice(self.row(id.as_ref())?);
            image_ids.push(id.as_ref().to_string());
        }
        ActivationMatrix::new(image_ids, self.layers.clone(), values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&FileHeader {
            image_ids: self.image_ids.clone(),
            layers: self.layers.clone(),
        })
        .expect("header serializes");
        let mut bytes =
            Vec::with_capacity(9 + header.len() + self.values.len() * std::mem::size_of::<f32>());
        bytes.extend_from_slice(&ACTV_MAGIC);
        bytes.push(ACTV_VERSION);
        bytes.extend_from_slice(
            &u32::try_from(header.len())
                .expect("header fits u32")
                .to_le_bytes(),
        );
        bytes.extend_from_slice(&header);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::util::atomic_write(path, &bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<ActivationMatrix> {
        let format_err = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = std::io::BufReader::new(file);

        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|_| format_err("file too short for magic"))?;
        if magic != ACTV_MAGIC {
            return Err(format_err(&format!(
                "bad magic {magic:?}, expected {ACTV_MAGIC:?}"
            )));
        }
        let mut version = [0u8; 1];
        reader
            .read_exact(&mut version)
            .map_err(|_| format_err("file too short for version"))?;
        if version[0] != ACTV_VERSION {
            return Err(format_err(&format!(
                "unsupported version {}, expected {ACTV_VERSION}",
                version[0]
            )));
        }
        let mut hlen = [0u8; 4];
        reader
            .read_exact(&mut hlen)
            .map_err(|_| format_err("file too short for header length"))?;
        let hlen = u32::from_le_bytes(hlen) as usize;
        let mut header = vec![0u8; hlen];
        reader
            .read_exact(&mut header)
            .map_err(|_| format_err("header truncated"))?;
        let header: FileHeader = serde_json::from_slice(&header)
            .map_err(|e| format_err(&format!("header is not valid JSON: {e}")))?;

        let (unit_count, _) = validate_layers(&header.layers)?;
        let expected = header.image_ids.len() * unit_count * std::mem::size_of::<f32>();
        let mut payload = Vec::with_capacity(expected);
        reader
            .read_to_end(&mut payload)
            .map_err(|e| Error::io(path, e))?;
        if payload.len() != expected {
            return Err(format_err(&format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ActivationMatrix::new(header.image_ids, header.layers, values)
    }
}

/// Reduces a conv feature map stored as `channels * height * width` values
/// (channel-major) to one spatial maximum per channel.
pub fn spatial_max_pool(
    channels: usize,
    height: usize,
    width: usize,
    data: &[f32],
) -> Result<Vec<f32>> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::EmptyInput {
            what: "feature map",
        });
    }
    let plane = height * width;
    let expected = channels * plane;
    if data.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "feature map values",
            expected,
            actual: data.len(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "feature map".into(),
        });
    }
    Ok((0..channels)
        .map(|c| {
            data[c * plane..(c + 1) * plane]
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<LayerSchema> {
        vec![
            LayerSchema {
                name: "conv1".into(),
                unit_count: 3,
                kind: LayerKind::Conv,
            },
            LayerSchema {
                name: "fc1".into(),
                unit_count: 2,
                kind: LayerKind::Fc,
            },
        ]
    }

    fn matrix() -> ActivationMatrix {
        let values: Vec<f32> = (0..10).map(|v| v as f32 / 2.0).collect();
        ActivationMatrix::new(vec!["a".into(), "b".into()], schema(), values).unwrap()
    }

    #[test]
    fn address_round_trips_over_all_units() {
        let m = matrix();
        for flat in 0..m.unit_count() {
            let addr = m.address_of(flat).unwrap();
            let back = m.address(addr.layer_index, addr.unit_index).unwrap();
            assert_eq!(back, addr);
            assert_eq!(back.flat_index, flat);
        }
        // Layer boundary: flat 3 is fc1 unit 0.
        let addr = m.address_of(3).unwrap();
        assert_eq!((addr.layer_index, addr.unit_index), (1, 0));
    }

    #[test]
    fn address_rejects_out_of_range() {
        let m = matrix();
        assert!(m.address_of(5).is_err());
        assert!(m.address(0, 3).is_err());
        assert!(m.address(2, 0).is_err());
    }

    #[test]
    fn row_and_column_access() {
        let m = matrix();
        assert_eq!(m.row("b").unwrap(), &[2.5, 3.0, 3.5, 4.0, 4.5]);
        assert_eq!(m.column(1).unwrap(), vec![0.5, 3.0]);
        assert!(m.row("missing").is_err());
        assert!(m.column(99).is_err());
    }

    #[test]
    fn rows_for_preserves_requested_order() {
        let m = matrix();
        let sub = m.rows_for(&["b", "a"]).unwrap();
        assert_eq!(sub.image_ids(), &["b".to_string(), "a".into()]);
        assert_eq!(sub.row("b").unwrap(), m.row("b").unwrap());
        assert!(m.rows_for(&["nope"]).is_err());
    }

    #[test]
    fn new_validates_shape_and_values() {
        assert!(matches!(
            ActivationMatrix::new(vec!["a".into()], schema(), vec![0.0; 4]).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
        assert!(matches!(
            ActivationMatrix::new(
                vec!["a".into()],
                schema(),
                vec![0.0, 1.0, f32::NAN, 0.0, 0.0]
            )
            .unwrap_err(),
            Error::NonFinite { .. }
        ));
        let dup = ActivationMatrix::new(vec!["a".into(), "a".into()], schema(), vec![0.0; 10]);
        assert!(matches!(dup.unwrap_err(), Error::DuplicateImageId { .. }));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let m = matrix();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.actv");
        m.write(&path).unwrap();
        let loaded = ActivationMatrix::read(&path).unwrap();
        assert_eq!(loaded.image_ids(), m.image_ids());
        assert_eq!(loaded.layers(), m.layers());
        for id in ["a", "b"] {
            let a = m.row(id).unwrap();
            let b = loaded.row(id).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // Writing twice produces identical bytes.
        let first = std::fs::read(&path).unwrap();
        m.write(&path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn read_rejects_corrupted_files() {
        let m = matrix();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.actv");
        m.write(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        let bad_version = {
            let mut b = good.clone();
            b[4] = 9;
            b
        };
        let truncated = good[..good.len() - 3].to_vec();
        let padded = {
            let mut b = good.clone();
            b.extend_from_slice(&[0, 0, 0, 0]);
            b
        };
        for bytes in [bad_magic, bad_version, truncated, padded] {
            std::fs::write(&path, &bytes).unwrap();
            assert!(matches!(
                ActivationMatrix::read(&path).unwrap_err(),
                Error::Format { .. }
            ));
        }
    }

    #[test]
    fn max_pool_takes_per_channel_maximum() {
        // 2 channels of 2x2.
        let data = [1.0, 5.0, 2.0, 0.5, -3.0, -1.0, -2.0, -4.0];
        assert_eq!(spatial_max_pool(2, 2, 2, &data).unwrap(), vec![5.0, -1.0]);
        assert!(spatial_max_pool(2, 2, 2, &data[..7]).is_err());
        assert!(spatial_max_pool(1, 1, 1, &[f32::INFINITY]).is_err());
    }
}
