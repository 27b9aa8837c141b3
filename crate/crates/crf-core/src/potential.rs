use crate::CrfError;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A single state sequence `z_0..z_{T-1}` with entries in `0..K`.
pub type HardPath = Vec<usize>;

/// Log-space factor tables for one linear chain of length `T` over `K`
/// states.
///
/// * `log_transition[i][j]`: score of moving from state `i` to state `j`,
///   shared across positions (time-homogeneous).
/// * `log_emission[t][j]`: score of state `j` at position `t`. Observations
///   are already folded in; this crate never sees the conditioning input
///   itself.
/// * `log_initial[j]`: score of starting in state `j`. A chain that always
///   starts in one state is expressed by setting the others to `-inf`.
///
/// Entries may be any finite `f64` or `-inf` ("forbidden"); `NaN` and `+inf`
/// are rejected at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableJson", into = "TableJson")]
pub struct PotentialTable {
    log_transition: Array2<f64>,
    log_emission: Array2<f64>,
    log_initial: Vec<f64>,
}

impl PotentialTable {
    pub fn new(
        log_transition: Array2<f64>,
        log_emission: Array2<f64>,
        log_initial: Vec<f64>,
    ) -> Result<Self, CrfError> {
        let k = log_initial.len();
        let t = log_emission.nrows();
        if k == 0 {
            return Err(CrfError::BadShape("K must be at least 1".into()));
        }
        if t == 0 {
            return Err(CrfError::BadShape("T must be at least 1".into()));
        }
        if log_transition.dim() != (k, k) {
            return Err(CrfError::BadShape(format!(
                "log_transition is {:?}, expected ({k}, {k})",
                log_transition.dim()
            )));
        }
        if log_emission.ncols() != k {
            return Err(CrfError::BadShape(format!(
                "log_emission is {:?}, expected ({t}, {k})",
                log_emission.dim()
            )));
        }
        let check = |name: &str, idx: String, v: f64| -> Result<(), CrfError> {
            if v.is_nan() || v == f64::INFINITY {
                Err(CrfError::InvalidScore {
                    location: format!("{name}{idx}"),
                    value: v,
                })
            } else {
                Ok(())
            }
        };
        for ((i, j), &v) in log_transition.indexed_iter() {
            check("log_transition", format!("[{i}][{j}]"), v)?;
        }
        for ((t, j), &v) in log_emission.indexed_iter() {
            check("log_emission", format!("[{t}][{j}]"), v)?;
        }
        for (j, &v) in log_initial.iter().enumerate() {
            check("log_initial", format!("[{j}]"), v)?;
        }
        Ok(Self {
            log_transition,
            log_emission,
            log_initial,
        })
    }

    /// Number of states `K`.
    pub fn num_states(&self) -> usize {
        self.log_initial.len()
    }

    /// Chain length `T`.
    pub fn seq_len(&self) -> usize {
        self.log_emission.nrows()
    }

    pub fn log_transition(&self) -> &Array2<f64> {
        &self.log_transition
    }

    pub fn log_emission(&self) -> &Array2<f64> {
        &self.log_emission
    }

    pub fn log_initial(&self) -> &[f64] {
        &self.log_initial
    }

    /// Validates that `path` has length `T` with states in `0..K`.
    pub fn check_path(&self, path: &[usize]) -> Result<(), CrfError> {
        if path.len() != self.seq_len() {
            return Err(CrfError::BadPath(format!(
                "length {} does not match T = {}",
                path.len(),
                self.seq_len()
            )));
        }
        for (t, &z) in path.iter().enumerate() {
            if z >= self.num_states() {
                return Err(CrfError::BadPath(format!(
                    "state {z} at position {t} is outside 0..{}",
                    self.num_states()
                )));
            }
        }
        Ok(())
    }

    /// Serializes to the interchange JSON layout. `-inf` entries are written
    /// as `null` because JSON has no literal for infinities.
    pub fn to_json(&self) -> Result<String, CrfError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses the layout produced by [`PotentialTable::to_json`], mapping
    /// `null` scores back to `-inf`.
    pub fn from_json(text: &str) -> Result<Self, CrfError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Interchange form: explicit `K`/`T` plus nested arrays, with `null`
/// standing in for `-inf` (serde_json writes non-finite floats as `null`, so
/// the sentinel also round-trips files produced by naive writers).
#[derive(Serialize, Deserialize, Clone)]
struct TableJson {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "T")]
    t: usize,
    log_transition: Vec<Vec<Option<f64>>>,
    log_emission: Vec<Vec<Option<f64>>>,
    log_initial: Vec<Option<f64>>,
}

fn encode(v: f64) -> Option<f64> {
    if v == f64::NEG_INFINITY {
        None
    } else {
        Some(v)
    }
}

fn decode(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NEG_INFINITY)
}

impl From<PotentialTable> for TableJson {
    fn from(p: PotentialTable) -> Self {
        TableJson {
            k: p.num_states(),
            t: p.seq_len(),
            log_transition: p
                .log_transition
                .rows()
                .into_iter()
                .map(|r| r.iter().copied().map(encode).collect())
                .collect(),
            log_emission: p
                .log_emission
                .rows()
                .into_iter()
                .map(|r| r.iter().copied().map(encode).collect())
                .collect(),
            log_initial: p.log_initial.iter().copied().map(encode).collect(),
        }
    }
}

impl TryFrom<TableJson> for PotentialTable {
    type Error = CrfError;

    fn try_from(j: TableJson) -> Result<Self, CrfError> {
        let rows_to_array = |rows: &[Vec<Option<f64>>], name: &str| -> Result<Array2<f64>, CrfError> {
            let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(CrfError::BadShape(format!("{name} rows have uneven length")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().map(decode).collect();
            Array2::from_shape_vec((rows.len(), ncols), flat)
                .map_err(|e| CrfError::BadShape(format!("{name}: {e}")))
        };
        let trans = rows_to_array(&j.log_transition, "log_transition")?;
        let emis = rows_to_array(&j.log_emission, "log_emission")?;
        let init: Vec<f64> = j.log_initial.into_iter().map(decode).collect();
        if init.len() != j.k || emis.nrows() != j.t {
            return Err(CrfError::BadShape(format!(
                "declared K = {}, T = {} but log_initial has {} entries and log_emission {} rows",
                j.k,
                j.t,
                init.len(),
                emis.nrows()
            )));
        }
        PotentialTable::new(trans, emis, init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_table() -> PotentialTable {
        PotentialTable::new(
            array![[0.1, -0.3], [f64::NEG_INFINITY, 0.7]],
            array![[0.0, 0.2], [1.0, -1.5], [0.4, 0.0]],
            vec![0.0, f64::NEG_INFINITY],
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip_preserves_neg_infinity() {
        let table = small_table();
        let text = table.to_json().unwrap();
        // The sentinel must appear literally; a bare "-inf" token would be
        // invalid JSON.
        assert!(text.contains("null"));
        let back = PotentialTable::from_json(&text).unwrap();
        assert_eq!(table, back);
    }

    #[test]
    fn json_layout_has_expected_keys() {
        let text = small_table().to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["K"], 2);
        assert_eq!(v["T"], 3);
        assert!(v["log_transition"].is_array());
        assert!(v["log_emission"].is_array());
        assert!(v["log_initial"].is_array());
    }

    #[test]
    fn rejects_nan_and_positive_infinity() {
        let bad_nan = PotentialTable::new(
            array![[f64::NAN]],
            array![[0.0]],
            vec![0.0],
        );
        assert!(matches!(bad_nan, Err(CrfError::InvalidScore { .. })));
        let bad_inf = PotentialTable::new(
            array![[0.0]],
            array![[f64::INFINITY]],
            vec![0.0],
        );
        assert!(matches!(bad_inf, Err(CrfError::InvalidScore { .. })));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let r = PotentialTable::new(
            array![[0.0, 0.0], [0.0, 0.0]],
            array![[0.0, 0.0]],
            vec![0.0, 0.0, 0.0],
        );
        assert!(matches!(r, Err(CrfError::BadShape(_))));
        let r = PotentialTable::new(Array2::zeros((0, 0)), Array2::zeros((1, 0)), vec![]);
        assert!(matches!(r, Err(CrfError::BadShape(_))));
    }

    #[test]
    fn rejects_json_with_inconsistent_declared_dims() {
        let text = r#"{"K": 3, "T": 1, "log_transition": [[0.0]], "log_emission": [[0.0]], "log_initial": [0.0]}"#;
        assert!(PotentialTable::from_json(text).is_err());
    }

    #[test]
    fn check_path_catches_bad_length_and_state() {
        let table = small_table();
        assert!(table.check_path(&[0, 1, 0]).is_ok());
        assert!(table.check_path(&[0, 1]).is_err());
        assert!(table.check_path(&[0, 2, 0]).is_err());
    }
}
