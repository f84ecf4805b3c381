use std::fmt::Write as _;
use std::io::Write;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unit in which a report is expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// Units of the record files (kW for SDWPF-style farms).
    Native,
    /// Native units divided by 1000.
    Mega,
}

impl Scale {
    pub fn factor(self) -> f64 {
        match self {
            Scale::Native => 1.0,
            Scale::Mega => 1e-3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Native => "native",
            Scale::Mega => "mega",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurbineMetric {
    pub id: String,
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
}

/// Farm-level metrics: the sum over turbines of each turbine's MAE and RMSE.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub scale: Scale,
    /// Turbines with at least one valid sample.
    pub per_turbine: Vec<TurbineMetric>,
    /// Turbines left out for lack of valid samples.
    pub excluded: Vec<String>,
}

impl MetricReport {
    pub fn samples(&self) -> usize {
        self.per_turbine.iter().map(|t| t.count).sum()
    }

    /// Per-turbine rows followed by a `farm` total row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "turbine,count,mae,rmse")?;
        for t in &self.per_turbine {
            writeln!(out, "{},{},{:?},{:?}", t.id, t.count, t.mae, t.rmse)?;
        }
        writeln!(out, "farm,{},{:?},{:?}", self.samples(), self.mae, self.rmse)?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mae = {:?}", self.mae);
        let _ = writeln!(s, "rmse = {:?}", self.rmse);
        let _ = writeln!(s, "scale = {}", self.scale.name());
        let _ = writeln!(s, "samples = {}", self.samples());
        let _ = writeln!(s, "turbines = {}", self.per_turbine.len());
        let _ = writeln!(s, "excluded = {}", self.excluded.join(","));
        for t in &self.per_turbine {
            let _ = writeln!(s, "turbine.{}.count = {}", t.id, t.count);
            let _ = writeln!(s, "turbine.{}.mae = {:?}", t.id, t.mae);
            let _ = writeln!(s, "turbine.{}.rmse = {:?}", t.id, t.rmse);
        }
        s
    }
}

/// Per-turbine running sums of absolute and squared errors.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    ids: Vec<String>,
    abs: Vec<f64>,
    sq: Vec<f64>,
    count: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(ids: Vec<String>) -> Self {
        let n = ids.len();
        MetricAccumulator { ids, abs: vec![0.0; n], sq: vec![0.0; n], count: vec![0; n] }
    }

    pub fn with_turbines(n: usize) -> Self {
        MetricAccumulator::new((0..n).map(|i| i.to_string()).collect())
    }

    /// Adds one block of samples; the leading axis of `y` is the turbine.
    pub fn add(&mut self, y: &Tensor, y_hat: &Tensor, mask: &[bool]) -> Result<()> {
        let n = self.ids.len();
        if y.shape() != y_hat.shape() || y.shape().first() != Some(&n) || mask.len() != y.numel() {
            return Err(Error::shape(format!(
                "metric inputs {:?} and {:?} with mask of {} for {n} turbines",
                y.shape(),
                y_hat.shape(),
                mask.len()
            )));
        }
        let per = y.numel() / n;
        for i in 0..n {
            let range = i * per..(i + 1) * per;
            for ((a, b), &m) in y.data()[range.clone()].iter().zip(&y_hat.data()[range.clone()]).zip(&mask[range]) {
                if m {
                    let e = a - b;
                    self.abs[i] += e.abs();
                    self.sq[i] += e * e;
                    self.count[i] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self, scale: Scale) -> Result<MetricReport> {
        let f = scale.factor();
        let mut per_turbine = Vec::new();
        let mut excluded = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            let m = self.count[i];
            if m == 0 {
                excluded.push(id.clone());
                continue;
            }
            per_turbine.push(TurbineMetric {
                id: id.clone(),
                count: m,
                mae: self.abs[i] / m as f64 * f,
                rmse: (self.sq[i] / m as f64).sqrt() * f,
            });
        }
        if !excluded.is_empty() {
            warn!("turbines without valid samples excluded: {}", excluded.join(","));
        }
        if per_turbine.is_empty() {
            return Err(Error::Evaluation("no turbine has a valid sample".into()));
        }
        Ok(MetricReport {
            mae: per_turbine.iter().map(|t| t.mae).sum(),
            rmse: per_turbine.iter().map(|t| t.rmse).sum(),
            scale,
            per_turbine,
            excluded,
        })
    }
}

fn report(y: &Tensor, y_hat: &Tensor, mask: &[bool]) -> Result<MetricReport> {
    let n = *y.shape().first().ok_or_else(|| Error::shape("metric input without a turbine axis"))?;
    let mut acc = MetricAccumulator::with_turbines(n);
    acc.add(y, y_hat, mask)?;
    acc.finish(Scale::Native)
}

/// `Σ_n (1/m_n) Σ_i |y − ŷ|` over valid cells; the leading axis is the turbine.
pub fn masked_mae(y: &Tensor, y_hat: &Tensor, mask: &[bool]) -> Result<f64> {
    Ok(report(y, y_hat, mask)?.mae)
}

/// `Σ_n sqrt((1/m_n) Σ_i (y − ŷ)²)` over valid cells.
pub fn masked_rmse(y: &Tensor, y_hat: &Tensor, mask: &[bool]) -> Result<f64> {
    Ok(report(y, y_hat, mask)?.rmse)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn hand_examples() {
        let y = t(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let y_hat = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let all = [true; 4];
        assert_eq!(masked_mae(&y, &y, &all).unwrap(), 0.0);
        assert_eq!(masked_rmse(&y, &y, &all).unwrap(), 0.0);
        assert_eq!(masked_mae(&y, &y_hat, &all).unwrap(), 1.0);
        assert!((masked_rmse(&y, &y_hat, &all).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-12);
        let mask = [false, true, true, false];
        assert_eq!(masked_mae(&y, &y_hat, &mask).unwrap(), 2.0);
        let one = t(&[&[3.0, 4.0]]);
        assert!((masked_rmse(&one, &t(&[&[0.0, 0.0]]), &[true, true]).unwrap() - 3.53553).abs() < 1e-5);
    }

    #[test]
    fn empty_turbines_are_excluded() {
        let y = t(&[&[1.0, 2.0], &[5.0, 5.0]]);
        let y_hat = t(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let mut acc = MetricAccumulator::new(vec!["a".into(), "b".into()]);
        acc.add(&y, &y_hat, &[true, true, false, false]).unwrap();
        let r = acc.finish(Scale::Native).unwrap();
        assert_eq!(r.excluded, ["b"]);
        assert_eq!(r.mae, 1.5);
        assert!(matches!(masked_mae(&y, &y_hat, &[false; 4]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn reporting_scale_divides_by_1000() {
        let y = t(&[&[1500.0, 500.0]]);
        let y_hat = t(&[&[1000.0, 1000.0]]);
        let mut acc = MetricAccumulator::with_turbines(1);
        acc.add(&y, &y_hat, &[true, true]).unwrap();
        assert_eq!(acc.finish(Scale::Native).unwrap().mae, 500.0);
        assert_eq!(acc.finish(Scale::Mega).unwrap().mae, 0.5);
    }

    #[test]
    fn report_text_forms() {
        let y = t(&[&[1.0], &[2.0]]);
        let mut acc = MetricAccumulator::new(vec!["7".into(), "9".into()]);
        acc.add(&y, &t(&[&[0.5], &[2.0]]), &[true, true]).unwrap();
        let r = acc.finish(Scale::Native).unwrap();
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "turbine,count,mae,rmse\n7,1,0.5,0.5\n9,1,0.0,0.0\nfarm,2,0.5,0.5\n");
        let kv = crate::model::parse_kv(&r.to_kv()).unwrap();
        assert_eq!(kv["mae"], "0.5");
        assert_eq!(kv["turbine.9.count"], "1");
    }
}
