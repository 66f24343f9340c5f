use super::io::CovariateTable;
use super::{draw_betas, standardize_columns, GeneratorId, SyntheticDataset, SyntheticSample};
use crate::error::{invalid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Average treatment effect the treated-surface offset is calibrated to.
pub const SURFACE_TARGET_EFFECT: f64 = 4.0;
/// Shift added to every standardized covariate inside the control surface.
pub const SURFACE_SHIFT: f64 = 0.5;
pub const SURFACE_NOISE_STD: f64 = 1.0;

/// Attaches simulated potential outcomes to a covariate table.
///
/// Control mean `exp((X + 0.5) β)`, treated mean `X β - ω`, with `X` the
/// column-standardized table and `ω` set so that the mean effect over all
/// rows equals [`SURFACE_TARGET_EFFECT`]. `treatment` overrides the table's
/// own treatment column.
pub fn simulate_response_surface_b(
    table: &CovariateTable,
    treatment: Option<&[u8]>,
    seed: u64,
) -> Result<SyntheticDataset> {
    let t = match (treatment, &table.treatment) {
        (Some(t), _) => t.to_vec(),
        (None, Some(t)) => t.clone(),
        (None, None) => return invalid("no treatment indicator in the table or from the caller"),
    };
    let mut ds = surface_from_rows(&table.rows, &t, table.names.clone(), seed, SURFACE_NOISE_STD)?;
    ds.generator_id = GeneratorId::ResponseSurfaceB;
    Ok(ds)
}

pub(crate) fn surface_from_rows(
    rows: &[Vec<f64>],
    treatment: &[u8],
    names: Vec<String>,
    seed: u64,
    noise_std: f64,
) -> Result<SyntheticDataset> {
    if rows.is_empty() {
        return invalid("covariate table is empty");
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return invalid("covariate rows must share a positive width");
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("covariate table contains non-finite entries");
    }
    if treatment.len() != rows.len() {
        return invalid("treatment vector length differs from the table");
    }
    if treatment.iter().any(|&t| t > 1) {
        return invalid("treatment must be 0 or 1");
    }
    if names.len() != d {
        return invalid("covariate names do not match the table width");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = draw_betas(&mut rng, d);
    let z = standardize_columns(rows);
    let linear: Vec<f64> = z
        .iter()
        .map(|r| r.iter().zip(&beta).map(|(x, b)| x * b).sum())
        .collect();
    let control: Vec<f64> = z
        .iter()
        .map(|r| {
            r.iter()
                .zip(&beta)
                .map(|(x, b)| (x + SURFACE_SHIFT) * b)
                .sum::<f64>()
                .exp()
        })
        .collect();
    let n = rows.len() as f64;
    let offset = linear.iter().sum::<f64>() / n - control.iter().sum::<f64>() / n - SURFACE_TARGET_EFFECT;
    let noise = Normal::new(0.0, noise_std).map_err(|e| crate::error::StedrError::InvalidConfig(e.to_string()))?;
    let samples = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mu0 = control[i];
            let mu1 = linear[i] - offset;
            let mean = if treatment[i] == 1 { mu1 } else { mu0 };
            let y = mean + noise.sample(&mut rng);
            SyntheticSample::new(row.clone(), treatment[i], y, mu0, mu1)
        })
        .collect();
    let mut coefficients = beta;
    coefficients.push(offset);
    Ok(SyntheticDataset {
        samples,
        covariate_names: names,
        generator_id: GeneratorId::ResponseSurfaceB,
        seed,
        coefficients,
    })
}

const IHDP_CONTINUOUS: [&str; 6] = ["bw", "b.head", "preterm", "birth.o", "nnhealth", "momage"];
const IHDP_BINARY: [(&str, f64); 19] = [
    ("sex", 0.51),
    ("twin", 0.05),
    ("b.marr", 0.52),
    ("mom.lths", 0.36),
    ("mom.hs", 0.27),
    ("mom.scoll", 0.21),
    ("cig", 0.35),
    ("first", 0.47),
    ("booze", 0.10),
    ("drugs", 0.05),
    ("work.dur", 0.59),
    ("prenatal", 0.96),
    ("ark", 0.14),
    ("ein", 0.16),
    ("har", 0.16),
    ("mia", 0.09),
    ("pen", 0.12),
    ("tex", 0.18),
    ("was", 0.15),
];
pub const IHDP_ROWS: usize = 747;
pub const IHDP_TREATED: usize = 139;

/// Offline stand-in with the shape of the infant-development covariate file:
/// 747 rows, 6 continuous and 19 binary covariates, 139 treated units
/// selected through a confounded propensity.
pub fn ihdp_like_covariates(seed: u64) -> CovariateTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let gumbel = |rng: &mut ChaCha8Rng| -> f64 {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        -(-u.ln()).ln()
    };
    let mut rows = Vec::with_capacity(IHDP_ROWS);
    let mut scores = Vec::with_capacity(IHDP_ROWS);
    for _ in 0..IHDP_ROWS {
        let mut row: Vec<f64> = (0..IHDP_CONTINUOUS.len()).map(|_| std.sample(&mut rng)).collect();
        for &(_, p) in &IHDP_BINARY {
            row.push(f64::from(u8::from(rng.gen_bool(p))));
        }
        let logit = 0.5 * row[0] + 0.3 * row[1] - 0.4 * row[5] + 0.6 * row[9] - 0.5 * row[11];
        scores.push(logit + gumbel(&mut rng));
        rows.push(row);
    }
    let mut order: Vec<usize> = (0..IHDP_ROWS).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut treatment = vec![0u8; IHDP_ROWS];
    for &i in &order[..IHDP_TREATED] {
        treatment[i] = 1;
    }
    let names = IHDP_CONTINUOUS
        .iter()
        .copied()
        .chain(IHDP_BINARY.iter().map(|b| b.0))
        .map(String::from)
        .collect();
    CovariateTable {
        names,
        rows,
        treatment: Some(treatment),
    }
}
