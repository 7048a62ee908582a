use std::path::Path;

use serde::Deserialize;

use crate::{Error, Result};

const BUNDLED: &str = include_str!("../../data/life_table.csv");

/// All-cause mortality rates by single year of age.
#[derive(Debug, Clone, PartialEq)]
pub struct LifeTable {
    entries: Vec<(f64, f64)>,
}

#[derive(Deserialize)]
struct Row {
    age: f64,
    mu: f64,
}

impl LifeTable {
    pub fn new(entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Argument("life table is empty".into()));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Argument(format!(
                    "life table ages must be strictly increasing ({} after {})",
                    w[1].0, w[0].0
                )));
            }
        }
        if let Some(&(age, mu)) = entries.iter().find(|(_, mu)| !(mu.is_finite() && *mu >= 0.0)) {
            return Err(Error::Argument(format!("invalid mortality rate {mu} at age {age}")));
        }
        let (min, max) = (entries[0].0, entries[entries.len() - 1].0);
        if min > super::START_AGE as f64 || max < super::END_AGE as f64 {
            return Err(Error::Argument(format!(
                "life table must cover ages {}-{}, covers {min}-{max}",
                super::START_AGE,
                super::END_AGE
            )));
        }
        Ok(LifeTable { entries })
    }

    /// Gompertz-Makeham approximation shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED.as_bytes(), Path::new("<bundled>")).expect("bundled life table is valid")
    }

    /// Reads an `age,mu` CSV.
    pub fn from_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::LifeTableNotFound(path.to_path_buf()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(file, path)
    }

    fn parse<R: std::io::Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let mut entries = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            entries.push((row.age, row.mu));
        }
        Self::new(entries).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    /// Mortality rate at `age`: the entry for the largest tabulated age not
    /// above `age`.
    pub fn mu(&self, age: f64) -> Result<f64> {
        let (min, max) = (self.entries[0].0, self.entries[self.entries.len() - 1].0);
        if !(age >= min && age <= max) {
            return Err(Error::AgeOutOfRange { age, min, max });
        }
        let idx = self.entries.partition_point(|&(a, _)| a <= age) - 1;
        Ok(self.entries[idx].1)
    }

    /// Table with zero mortality at every age 0-110; useful for isolating
    /// disease dynamics.
    pub fn zero() -> Self {
        LifeTable {
            entries: (0..=110).map(|a| (a as f64, 0.0)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_table_follows_gompertz_makeham() {
        let lt = LifeTable::bundled();
        for age in [50.0, 75.0, 100.0] {
            let expected = 0.0007 + 5e-5 * (0.085 * age as f64).exp();
            assert!((lt.mu(age).unwrap() / expected - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn lookup_uses_step_function() {
        let lt = LifeTable::bundled();
        assert_eq!(lt.mu(60.7).unwrap(), lt.mu(60.0).unwrap());
    }

    #[test]
    fn out_of_range_age_is_rejected() {
        let lt = LifeTable::bundled();
        assert!(matches!(lt.mu(120.0), Err(Error::AgeOutOfRange { .. })));
        assert!(lt.mu(-1.0).is_err());
    }

    #[test]
    fn construction_checks_invariants() {
        assert!(LifeTable::new(vec![(50.0, 0.01), (50.0, 0.02)]).is_err());
        assert!(LifeTable::new(vec![(50.0, -0.01), (100.0, 0.02)]).is_err());
        assert!(LifeTable::new(vec![(60.0, 0.01), (100.0, 0.02)]).is_err());
        assert!(LifeTable::new(vec![(50.0, 0.01), (100.0, 0.02)]).is_ok());
    }

    #[test]
    fn missing_file_reports_not_found() {
        let err = LifeTable::from_csv(Path::new("/nonexistent/lt.csv")).unwrap_err();
        assert!(err.to_string().contains("life table not found"));
    }

    #[test]
    fn reads_csv_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lt.csv");
        let body: String = std::iter::once("age,mu\n".to_string())
            .chain((40..=105).map(|a| format!("{a},0.01\n")))
            .collect();
        std::fs::write(&path, body).unwrap();
        let lt = LifeTable::from_csv(&path).unwrap();
        assert_eq!(lt.mu(70.0).unwrap(), 0.01);
    }
}
