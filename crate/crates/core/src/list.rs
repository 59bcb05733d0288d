//! List-domain samples: fixed-length tables of `(x, y, α, η)` rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One row of an object list. Positions are normalized to `[0, 1]` over the
/// padded image; `alpha` is the presence probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub eta: Vec<f64>,
}

impl ObjectEntry {
    pub fn new(x: f64, y: f64, alpha: f64, eta: Vec<f64>) -> Self {
        ObjectEntry { x, y, alpha, eta }
    }

    pub fn in_range(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x) && unit(self.y) && unit(self.alpha) && self.eta.iter().all(|&e| unit(e))
    }
}

/// Unordered list of exactly `k` entries; row order carries no meaning.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectList {
    pub entries: Vec<ObjectEntry>,
}

impl ObjectList {
    pub fn new(entries: Vec<ObjectEntry>) -> Self {
        ObjectList { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn eta_dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.eta.len())
    }

    /// Rows with `alpha > threshold`.
    pub fn active(&self, threshold: f64) -> impl Iterator<Item = &ObjectEntry> {
        self.entries.iter().filter(move |e| e.alpha > threshold)
    }

    pub fn width(&self) -> usize {
        3 + self.eta_dim()
    }

    /// Stacks lists of equal length and feature size into `[N, k, 3 + |η|]`.
    pub fn batch_to_tensor<T: Real>(lists: &[ObjectList]) -> Result<Tensor<T>> {
        let first = lists
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty list batch".into()))?;
        let (k, e) = (first.len(), first.eta_dim());
        let mut data = Vec::with_capacity(lists.len() * k * (3 + e));
        for l in lists {
            if l.len() != k {
                return Err(Error::LengthMismatch {
                    left: k,
                    right: l.len(),
                });
            }
            for row in &l.entries {
                if row.eta.len() != e {
                    return Err(Error::Shape {
                        op: "list batch",
                        detail: format!("|η| {} vs {e}", row.eta.len()),
                    });
                }
                data.push(T::lit(row.x));
                data.push(T::lit(row.y));
                data.push(T::lit(row.alpha));
                data.extend(row.eta.iter().map(|&v| T::lit(v)));
            }
        }
        Tensor::new(vec![lists.len(), k, 3 + e], data)
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<ObjectList>> {
        let s = t.shape();
        if s.len() != 3 || s[2] < 3 {
            return Err(Error::Shape {
                op: "list from tensor",
                detail: format!("{s:?}"),
            });
        }
        let f = s[2];
        Ok(t.data()
            .chunks(s[1] * f)
            .map(|sample| ObjectList {
                entries: sample
                    .chunks(f)
                    .map(|r| ObjectEntry {
                        x: r[0].as_f64(),
                        y: r[1].as_f64(),
                        alpha: r[2].as_f64(),
                        eta: r[3..].iter().map(|v| v.as_f64()).collect(),
                    })
                    .collect(),
            })
            .collect())
    }

    /// Reorders rows: `out[j] = self[perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> ObjectList {
        ObjectList {
            entries: perm.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}
