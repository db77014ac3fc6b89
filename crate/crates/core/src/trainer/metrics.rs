use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row per iteration per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: u32,
    pub phase: u8,
    pub node: usize,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
    pub uplink_bytes: u64,
    pub ae_rec_loss: Option<f64>,
    pub ae_sim_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsSeries {
    pub rows: Vec<MetricRow>,
}

impl MetricsSeries {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::format(e.to_string()))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let rows = csv::Reader::from_reader(input)
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Most recent evaluation accuracy.
    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_acc)
    }

    /// `(iter, ae_rec_loss)` for every iteration that trained the autoencoder.
    pub fn ae_rec_losses(&self) -> Vec<(u32, f64)> {
        let mut out: Vec<(u32, f64)> = self
            .rows
            .iter()
            .filter(|r| r.node == 0)
            .filter_map(|r| r.ae_rec_loss.map(|l| (r.iter, l)))
            .collect();
        out.dedup_by_key(|p| p.0);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_columns_and_round_trip() {
        let m = MetricsSeries {
            rows: vec![MetricRow {
                iter: 3,
                phase: 2,
                node: 1,
                train_loss: 0.25,
                eval_acc: None,
                uplink_bytes: 88,
                ae_rec_loss: Some(1.5),
                ae_sim_loss: None,
            }],
        };
        let text = m.to_csv_string().unwrap();
        assert_eq!(
            text,
            "iter,phase,node,train_loss,eval_acc,uplink_bytes,ae_rec_loss,ae_sim_loss\n3,2,1,0.25,,88,1.5,\n"
        );
        assert_eq!(MetricsSeries::read_csv(text.as_bytes()).unwrap(), m);
    }
}
