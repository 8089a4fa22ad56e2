use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fewest samples accepted on either side of a comparison.
pub const MIN_SAMPLES: usize = 256;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pairwise(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += euclid(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Square root of `2 E|X - Y| - E|X - X'| - E|Y - Y'|`, with every
/// expectation taken over all ordered pairs (the V-statistic). Zero for
/// identical sets; two point masses `r` apart give `r`.
pub fn energy_distance_rows(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let d2 = 2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b);
    d2.max(0.0).sqrt()
}

fn rows(x: &Tensor<f64>) -> Result<Vec<&[f64]>> {
    if x.rank() != 2 || x.dim(1) == 0 {
        return Err(Error::invalid("energy distance", format!("expected [n, f] samples, got {:?}", x.shape())));
    }
    Ok(x.data().chunks_exact(x.dim(1)).collect())
}

fn check_sizes(samples: &Tensor<f64>, reference: &Tensor<f64>) -> Result<()> {
    for (what, t) in [("samples", samples), ("reference", reference)] {
        if t.rank() != 2 || t.dim(0) < MIN_SAMPLES {
            return Err(Error::invalid(
                "energy distance",
                format!("need at least {MIN_SAMPLES} {what}, got shape {:?}", t.shape()),
            ));
        }
    }
    if samples.dim(1) != reference.dim(1) {
        return Err(Error::shape("energy distance", samples.shape(), reference.shape()));
    }
    Ok(())
}

pub fn energy_distance(samples: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64> {
    check_sizes(samples, reference)?;
    Ok(energy_distance_rows(&rows(samples)?, &rows(reference)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub energy_distance: f64,
    /// Euclidean distance between the class means of the two sets.
    pub mean_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub energy_distance: f64,
    pub per_class: Vec<ClassReport>,
}

/// Compare generated samples with reference data. With labels on both
/// sides, each class present in the reference is also scored on its own.
pub fn evaluate_samples(
    samples: &Tensor<f64>,
    reference: &Tensor<f64>,
    labels: Option<(&[usize], &[usize])>,
) -> Result<EvalReport> {
    check_sizes(samples, reference)?;
    let (sr, rr) = (rows(samples)?, rows(reference)?);
    let energy_distance = energy_distance_rows(&sr, &rr);
    let Some((sl, rl)) = labels else {
        return Ok(EvalReport {
            energy_distance,
            per_class: Vec::new(),
        });
    };
    if sl.len() != sr.len() || rl.len() != rr.len() {
        return Err(Error::invalid("evaluate samples", "one label per row required".to_string()));
    }
    let mut classes: Vec<usize> = rl.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::with_capacity(classes.len());
    for c in classes {
        let (a, b) = (of_class(&sr, sl, c), of_class(&rr, rl, c));
        if a.is_empty() {
            return Err(Error::invalid("evaluate samples", format!("no samples generated for class {c}")));
        }
        per_class.push(ClassReport {
            class: c,
            energy_distance: energy_distance_rows(&a, &b),
            mean_error: euclid(&centroid(&a), &centroid(&b)),
        });
    }
    Ok(EvalReport {
        energy_distance,
        per_class,
    })
}

fn of_class<'a>(rows: &[&'a [f64]], labels: &[usize], class: usize) -> Vec<&'a [f64]> {
    rows.iter().zip(labels).filter(|(_, &l)| l == class).map(|(r, _)| *r).collect()
}

fn centroid(rows: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (acc, v) in m.iter_mut().zip(r.iter()) {
            *acc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_masses_give_their_separation() {
        let a = Tensor::full(vec![300, 2], 0.0);
        let b = Tensor::new(vec![300, 2], [2.0, 0.0].repeat(300)).unwrap();
        assert!((energy_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let a = Tensor::zeros(vec![255, 2]);
        let b = Tensor::zeros(vec![300, 2]);
        assert!(energy_distance(&a, &b).is_err());
        assert!(energy_distance(&b, &a).is_err());
    }

    #[test]
    fn per_class_scores() {
        let a = Tensor::new(vec![256, 1], (0..256).map(|i| (i % 2) as f64).collect()).unwrap();
        let la: Vec<usize> = (0..256).map(|i| i % 2).collect();
        let b = Tensor::new(vec![256, 1], (0..256).map(|i| (i % 2) as f64 + 0.5).collect()).unwrap();
        let report = evaluate_samples(&a, &b, Some((&la, &la))).unwrap();
        assert_eq!(report.per_class.len(), 2);
        for c in &report.per_class {
            assert!((c.mean_error - 0.5).abs() < 1e-12);
            // sqrt(2 * 0.5 - 0 - 0)
            assert!((c.energy_distance - 1.0).abs() < 1e-12);
        }
    }
}
