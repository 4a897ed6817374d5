use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};
use crate::ids::ItemId;
use crate::numerics::{normal_init, Mlp, NodeId, ParamId, ParamRole, ParamStore, Scalar, Tape, Tensor2};

/// An item and its time-invariant categorical features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: ItemId,
    /// `(field id, value id)` pairs.
    pub static_features: Vec<(usize, usize)>,
}

/// Summed per-field embeddings followed by a two-layer MLP with output width `dim`.
///
/// Each field table carries one extra trailing row used for out-of-vocabulary
/// values and for fields an item does not list.
#[derive(Clone, Debug)]
pub struct ItemEncoder {
    pub fields: Vec<ParamId>,
    pub cardinalities: Vec<usize>,
    pub mlp: Mlp,
    pub dim: usize,
}

impl ItemEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cardinalities: &[usize],
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (cardinalities.len().max(1) as f64).sqrt();
        let fields = cardinalities
            .iter()
            .enumerate()
            .map(|(f, &card)| store.add(format!("encoder.field{f}"), normal_init(card + 1, dim, std, rng), ParamRole::Trainable))
            .collect();
        let mlp = Mlp::new(store, "encoder.mlp", &[dim, hidden, dim], rng);
        Self {
            fields,
            cardinalities: cardinalities.to_vec(),
            mlp,
            dim,
        }
    }

    fn field_rows(&self, records: &[&ItemRecord]) -> Result<Vec<Vec<usize>>> {
        let mut rows: Vec<Vec<usize>> = self.cardinalities.iter().map(|&c| vec![c; records.len()]).collect();
        for (i, rec) in records.iter().enumerate() {
            for &(field, value) in &rec.static_features {
                let card = *self.cardinalities.get(field).ok_or(DigError::UnknownField {
                    field,
                    fields: self.cardinalities.len(),
                })?;
                rows[field][i] = if value < card { value } else { card };
            }
        }
        Ok(rows)
    }

    /// Summed field embeddings, before the MLP.
    pub fn embed_fields<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, records: &[&ItemRecord]) -> Result<NodeId> {
        let rows = self.field_rows(records)?;
        let mut acc: Option<NodeId> = None;
        for (table, idx) in self.fields.iter().zip(rows) {
            let g = tape.gather(store, *table, idx);
            acc = Some(match acc {
                Some(a) => tape.add(a, g),
                None => g,
            });
        }
        Ok(acc.unwrap_or_else(|| tape.constant(Tensor2::zeros(records.len(), self.dim))))
    }

    /// `e_v = Enc(x_v^s)` for a batch of items, recorded on the tape.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, records: &[&ItemRecord]) -> Result<NodeId> {
        let x = self.embed_fields(tape, store, records)?;
        Ok(self.mlp.forward(tape, store, x))
    }

    /// Gradient-free encoding, chunked to bound tape size.
    pub fn encode_values<T: Scalar>(&self, store: &ParamStore<T>, records: &[&ItemRecord]) -> Result<Tensor2<T>> {
        let mut out = Tensor2::zeros(records.len(), self.dim);
        for (c, chunk) in records.chunks(512).enumerate() {
            let mut tape = Tape::new();
            let e = self.encode(&mut tape, store, chunk)?;
            let v = tape.value(e);
            for r in 0..chunk.len() {
                out.row_mut(c * 512 + r).copy_from_slice(v.row(r));
            }
        }
        Ok(out)
    }
}

/// Encodes a single item.
pub fn encode_item<T: Scalar>(rec: &ItemRecord, enc: &ItemEncoder, store: &ParamStore<T>) -> Result<Vec<T>> {
    Ok(enc.encode_values(store, &[rec])?.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(features: &[(usize, usize)]) -> ItemRecord {
        ItemRecord {
            item_id: ItemId(0),
            static_features: features.to_vec(),
        }
    }

    #[test]
    fn zero_parameters_give_zero_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let enc = ItemEncoder::new(&mut store, &[3, 4], 4, 8, &mut rng);
        for f in &enc.fields {
            store.value_mut(*f).data_mut().fill(0.0);
        }
        for l in &enc.mlp.layers {
            store.value_mut(l.bias).data_mut().fill(0.0);
        }
        let e = encode_item(&rec(&[(0, 1), (1, 2)]), &enc, &store).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let enc = ItemEncoder::new(&mut store, &[3, 4], 4, 8, &mut rng);
        let r = rec(&[(0, 2), (1, 0)]);
        assert_eq!(encode_item(&r, &enc, &store).unwrap(), encode_item(&r, &enc, &store).unwrap());
    }

    #[test]
    fn identity_mlp_passes_field_row_through() {
        // W1 = [I, −I], W2 = [I; −I]: relu(x) − relu(−x) = x.
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let enc = ItemEncoder::new(&mut store, &[5], d, 2 * d, &mut rng);
        let w1 = store.value_mut(enc.mlp.layers[0].weight);
        w1.data_mut().fill(0.0);
        for i in 0..d {
            w1.set(i, i, 1.0);
            w1.set(i, d + i, -1.0);
        }
        let w2 = store.value_mut(enc.mlp.layers[1].weight);
        w2.data_mut().fill(0.0);
        for i in 0..d {
            w2.set(i, i, 1.0);
            w2.set(d + i, i, -1.0);
        }
        let row = store.value(enc.fields[0]).row(3).to_vec();
        let e = encode_item(&rec(&[(0, 3)]), &enc, &store).unwrap();
        for (a, b) in e.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_field_is_error_and_unknown_value_uses_oov() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = ItemEncoder::new(&mut store, &[3], 4, 8, &mut rng);
        assert!(matches!(
            encode_item(&rec(&[(1, 0)]), &enc, &store),
            Err(DigError::UnknownField { field: 1, .. })
        ));
        let oov = encode_item(&rec(&[(0, 99)]), &enc, &store).unwrap();
        let missing = encode_item(&rec(&[]), &enc, &store).unwrap();
        assert_eq!(oov, missing);
    }
}
