//! Class frequency and inter-class correlation of mean feature patterns.

use std::io::Write;

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// `(class name, sample count)` for every class, in class-id order.
pub fn class_stats(dataset: &FeatureDataset) -> Result<Vec<(String, usize)>> {
    if dataset.is_empty() {
        return Err(Error::Empty("class_stats"));
    }
    let mut counts = vec![0usize; dataset.n_classes()];
    for &l in dataset.labels() {
        counts[l] += 1;
    }
    Ok(dataset.class_names().iter().cloned().zip(counts).collect())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let denom = (saa * sbb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (sab / denom).clamp(-1.0, 1.0)
    }
}

/// Pearson correlation between per-class mean feature vectors. The diagonal
/// is 1; pairs involving a constant (or empty) mean vector correlate 0.
pub fn class_correlation(dataset: &FeatureDataset) -> Result<Matrix> {
    if dataset.is_empty() {
        return Err(Error::Empty("class_correlation"));
    }
    let k = dataset.n_classes();
    let d = dataset.dim();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in dataset.features().iter_rows().zip(dataset.labels()) {
        counts[l] += 1;
        means[l].iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let mut corr = Matrix::identity(k);
    for i in 0..k {
        for j in i + 1..k {
            let r = pearson(&means[i], &means[j]);
            corr[(i, j)] = r;
            corr[(j, i)] = r;
        }
    }
    Ok(corr)
}

/// `class,count` rows.
pub fn write_class_counts<W: Write>(counts: &[(String, usize)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "count"])?;
    for (name, count) in counts {
        w.write_record([name.as_str(), &count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Square matrix with class names as header row and first column.
pub fn write_correlation<W: Write>(names: &[String], corr: &Matrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::from("class")];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(corr.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(rows: &[[f64; 4]], labels: Vec<usize>, k: usize) -> FeatureDataset {
        FeatureDataset::new(
            Matrix::from_rows(rows).unwrap(),
            labels,
            None,
            (0..k).map(|c| format!("c{c}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_means_correlate_fully() {
        let ds = dataset(&[[1.0, 2.0, 0.0, 5.0], [1.0, 2.0, 0.0, 5.0]], vec![0, 1], 2);
        let c = class_correlation(&ds).unwrap();
        assert_eq!(c[(0, 1)], 1.0);
        assert_eq!(c[(0, 0)], 1.0);
    }

    #[test]
    fn anti_correlated_patterns() {
        let ds = dataset(
            &[
                [1.0, -1.0, 2.0, 0.0],
                [-1.0, 1.0, -2.0, 0.0],
                [0.0, 3.0, 1.0, 1.0],
            ],
            vec![0, 1, 2],
            3,
        );
        let c = class_correlation(&ds).unwrap();
        assert!((c[(0, 1)] + 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert_eq!(c[(i, i)], 1.0);
            for j in 0..3 {
                assert!((c[(i, j)] - c[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counts_and_csv_layout() {
        let ds = dataset(&[[0.0; 4], [1.0; 4], [2.0; 4]], vec![0, 1, 1], 2);
        let counts = class_stats(&ds).unwrap();
        assert_eq!(counts, vec![("c0".to_owned(), 1), ("c1".to_owned(), 2)]);
        let mut buf = Vec::new();
        write_class_counts(&counts, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "class,count\nc0,1\nc1,2\n");
        let mut buf = Vec::new();
        write_correlation(ds.class_names(), &Matrix::identity(2), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "class,c0,c1\nc0,1,0\nc1,0,1\n"
        );
    }
}
