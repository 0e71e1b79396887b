//! Clinical variables and zone masks rendered as a fill-in-the-blank report,
//! plus the closed template vocabulary used to tokenize it.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Bumped whenever the template wording or the vocabulary changes.
pub const TEMPLATE_VERSION: u32 = 1;

pub const DEFAULT_RADIUS_MM: f64 = 15.0;

pub const UNKNOWN: &str = "unknown";
pub const PAD: &str = "<pad>";

const LEVELS_3: [&str; 3] = ["low", "intermediate", "high"];
const LEVELS_4: [&str; 4] = ["low", "intermediate", "high", "very-high"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalVars {
    /// Years.
    pub age: Option<f64>,
    /// ng/mL.
    pub psa: Option<f64>,
    /// ng/mL/cc.
    pub psad: Option<f64>,
    /// cc.
    pub pv: Option<f64>,
}

fn cutoffs(var: &str) -> Result<(&'static [f64], &'static [&'static str])> {
    Ok(match var {
        "age" => (&[50.0, 60.0], &LEVELS_3),
        "psa" => (&[10.0, 20.0], &LEVELS_3),
        "psad" => (&[0.10, 0.15, 0.20], &LEVELS_4),
        "pv" => (&[30.0, 60.0], &LEVELS_3),
        other => return Err(Error::InvalidVariable(other.to_string())),
    })
}

/// Left-closed bucketing: a value equal to a cutoff falls in the upper bucket.
pub fn categorize(var: &str, value: Option<f64>) -> Result<&'static str> {
    let (cuts, names) = cutoffs(var)?;
    let Some(v) = value else {
        return Ok(UNKNOWN);
    };
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::invalid(format!("{var} must be finite and non-negative, got {v}")));
    }
    Ok(names[cuts.iter().filter(|&&c| v >= c).count()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneFractions {
    pub p_pz: f64,
    pub p_cz: f64,
    pub p_out: f64,
}

/// Fractions of voxel centers within `radius_mm` of `centroid_mm` that lie in
/// the peripheral zone, the central zone, and neither. Non-zero mask voxels
/// count as inside.
pub fn sphere_zone_fractions(
    centroid_mm: [f64; 3],
    radius_mm: f64,
    pz: &Volume,
    cz: &Volume,
) -> Result<ZoneFractions> {
    if pz.header() != cz.header() {
        return Err(Error::InvalidMasks("masks do not share grid and spacing".into()));
    }
    if pz.data().iter().zip(cz.data()).any(|(a, b)| *a != 0.0 && *b != 0.0) {
        return Err(Error::InvalidMasks("peripheral and central masks overlap".into()));
    }
    if !(radius_mm.is_finite() && radius_mm > 0.0) || centroid_mm.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("radius must be positive and centroid finite"));
    }
    let (h, w, d) = pz.dims();
    let [sx, sy, sz] = pz.spacing();
    let [cx, cy, cz_mm] = centroid_mm;
    let r2 = radius_mm * radius_mm;

    let range = |c: f64, s: f64, n: usize| -> (usize, usize) {
        let lo = ((c - radius_mm) / s).ceil().max(0.0);
        let hi = ((c + radius_mm) / s).floor().min(n as f64 - 1.0);
        if hi < lo {
            (1, 0)
        } else {
            (lo as usize, hi as usize)
        }
    };
    let (y0, y1) = range(cy, sy, h);
    let (x0, x1) = range(cx, sx, w);
    let (z0, z1) = range(cz_mm, sz, d);

    let (mut n_pz, mut n_cz, mut total) = (0usize, 0usize, 0usize);
    for y in y0..=y1 {
        let dy = y as f64 * sy - cy;
        for x in x0..=x1 {
            let dx = x as f64 * sx - cx;
            for z in z0..=z1 {
                let dz = z as f64 * sz - cz_mm;
                if dx * dx + dy * dy + dz * dz <= r2 {
                    total += 1;
                    if pz.get(y, x, z) != 0.0 {
                        n_pz += 1;
                    } else if cz.get(y, x, z) != 0.0 {
                        n_cz += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::DegenerateSphere { radius_mm });
    }
    let t = total as f64;
    Ok(ZoneFractions {
        p_pz: n_pz as f64 / t,
        p_cz: n_cz as f64 / t,
        p_out: (total - n_pz - n_cz) as f64 / t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// The extension phrase is added when `p_out` exceeds this.
    pub extension_threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            extension_threshold: 0.1,
        }
    }
}

/// Location phrase for the dominant zone; ties go to PZ, then CZ.
fn zone_phrase(zf: &ZoneFractions) -> &'static str {
    if zf.p_pz >= zf.p_cz && zf.p_pz >= zf.p_out {
        "located in the peripheral zone"
    } else if zf.p_cz >= zf.p_out {
        "located in the central zone"
    } else {
        "located outside the gland"
    }
}

pub fn build_report(vars: &ClinicalVars, zf: &ZoneFractions) -> String {
    build_report_with(vars, zf, &ReportConfig::default())
}

pub fn build_report_with(vars: &ClinicalVars, zf: &ZoneFractions, cfg: &ReportConfig) -> String {
    // Every variable name is known, so categorize only fails on bad values,
    // which are reported as unknown.
    let cat = |var: &str, v: Option<f64>| categorize(var, v).unwrap_or(UNKNOWN);
    let mut s = format!(
        "patient with {} age , {} psa , {} psa density and {} prostate volume ; lesion {}",
        cat("age", vars.age),
        cat("psa", vars.psa),
        cat("psad", vars.psad),
        cat("pv", vars.pv),
        zone_phrase(zf),
    );
    if zf.p_out > cfg.extension_threshold {
        s.push_str(" with extension beyond the gland");
    }
    s.push_str(" .");
    s
}

/// Index of the PSAD category among the report's tokens.
pub const PSAD_SLOT: usize = 8;
/// Index of the zone word among the report's tokens.
pub const ZONE_SLOT: usize = 20;

const TEMPLATE_TOKENS: &[&str] = &[
    ",", ".", ";", "age", "and", "beyond", "central", "density", "extension", "gland", "high", "in", "intermediate",
    "lesion", "located", "low", "outside", "patient", "peripheral", "prostate", "psa", "the", "very-high", "volume",
    "with", "zone", PAD, UNKNOWN,
];

/// Closed, sorted token list; the line number of a token is its ID.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut tokens: Vec<String> = TEMPLATE_TOKENS.iter().map(|t| t.to_string()).collect();
        tokens.sort();
        Self::from_tokens(tokens).expect("template vocabulary is well formed")
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("vocabulary line {} is not a single token", i + 1)));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for required in [UNKNOWN, PAD] {
            if !ids.contains_key(required) {
                return Err(Error::invalid(format!("vocabulary lacks `{required}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn unknown_id(&self) -> u32 {
        self.ids[UNKNOWN]
    }

    pub fn pad_id(&self) -> u32 {
        self.ids[PAD]
    }

    /// Whitespace split and exact lookup; unseen tokens map to `unknown`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or_else(|| self.unknown_id()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.tokens
                    .get(i as usize)
                    .map(String::as_str)
                    .ok_or_else(|| Error::invalid(format!("token id {i} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorize_examples() {
        assert_eq!(categorize("age", Some(55.0)).unwrap(), "intermediate");
        assert_eq!(categorize("psa", Some(25.0)).unwrap(), "high");
        assert_eq!(categorize("psad", Some(0.10)).unwrap(), "intermediate");
        assert_eq!(categorize("psad", Some(0.0999)).unwrap(), "low");
        assert_eq!(categorize("psad", Some(0.25)).unwrap(), "very-high");
        assert_eq!(categorize("pv", None).unwrap(), UNKNOWN);
        assert!(matches!(categorize("bmi", Some(1.0)), Err(Error::InvalidVariable(_))));
        assert!(categorize("age", Some(-1.0)).is_err());
    }

    /// Independent bucketing oracle over every cutoff and its neighbors.
    #[test]
    fn categorize_boundaries() {
        let table: [(&str, &[f64]); 4] = [
            ("age", &[50.0, 60.0]),
            ("psa", &[10.0, 20.0]),
            ("psad", &[0.10, 0.15, 0.20]),
            ("pv", &[30.0, 60.0]),
        ];
        for (var, cuts) in table {
            let names: &[&str] = if cuts.len() == 3 { &LEVELS_4 } else { &LEVELS_3 };
            for (k, &c) in cuts.iter().enumerate() {
                assert_eq!(categorize(var, Some(c)).unwrap(), names[k + 1]);
                assert_eq!(categorize(var, Some(c * (1.0 - 1e-12))).unwrap(), names[k]);
            }
        }
    }

    fn masks_from(f: impl Fn(usize, usize, usize) -> (bool, bool)) -> (Volume, Volume) {
        let sp = [0.5, 0.5, 3.0];
        let pz = Volume::from_fn(80, 80, 14, sp, |y, x, z| f64::from(u8::from(f(y, x, z).0))).unwrap();
        let cz = Volume::from_fn(80, 80, 14, sp, |y, x, z| f64::from(u8::from(f(y, x, z).1))).unwrap();
        (pz, cz)
    }

    #[test]
    fn zone_fractions_inside_and_outside() {
        let c = [20.25, 20.25, 21.0];
        let (pz, cz) = masks_from(|_, _, _| (true, false));
        let zf = sphere_zone_fractions(c, 15.0, &pz, &cz).unwrap();
        assert_eq!((zf.p_pz, zf.p_cz, zf.p_out), (1.0, 0.0, 0.0));
        let (pz, cz) = masks_from(|_, _, _| (false, false));
        let zf = sphere_zone_fractions(c, 15.0, &pz, &cz).unwrap();
        assert_eq!((zf.p_pz, zf.p_cz, zf.p_out), (0.0, 0.0, 1.0));
    }

    #[test]
    fn zone_fraction_errors() {
        let (pz, cz) = masks_from(|y, _, _| (y < 40, y < 41));
        assert!(matches!(
            sphere_zone_fractions([20.0, 20.0, 21.0], 15.0, &pz, &cz),
            Err(Error::InvalidMasks(_))
        ));
        let (pz, cz) = masks_from(|_, _, _| (true, false));
        assert!(matches!(
            sphere_zone_fractions([0.25, 0.25, 1.5], 0.2, &pz, &cz),
            Err(Error::DegenerateSphere { .. })
        ));
        assert!(matches!(
            sphere_zone_fractions([500.0, 500.0, 500.0], 15.0, &pz, &cz),
            Err(Error::DegenerateSphere { .. })
        ));
    }

    #[test]
    fn report_determinism_and_unknowns() {
        let zf = ZoneFractions {
            p_pz: 1.0,
            p_cz: 0.0,
            p_out: 0.0,
        };
        let r = build_report(&ClinicalVars::default(), &zf);
        assert_eq!(
            r,
            "patient with unknown age , unknown psa , unknown psa density and unknown prostate volume ; \
             lesion located in the peripheral zone ."
        );
        assert_eq!(r, build_report(&ClinicalVars::default(), &zf));
    }

    #[test]
    fn example_case_fits_text_budget() {
        let vars = ClinicalVars {
            age: Some(55.0),
            psa: Some(25.0),
            psad: Some(0.12),
            pv: Some(40.0),
        };
        let zf = ZoneFractions {
            p_pz: 0.6,
            p_cz: 0.3,
            p_out: 0.1,
        };
        let r = build_report(&vars, &zf);
        let words: Vec<&str> = r.split_whitespace().collect();
        assert_eq!(words[2], "intermediate");
        assert_eq!(words[5], "high");
        assert_eq!(words[PSAD_SLOT], "intermediate");
        assert_eq!(words[ZONE_SLOT], "peripheral");
        let v = Vocabulary::default();
        let ids = v.tokenize(&r);
        assert!(ids.len() < 32);
        assert!(!ids.contains(&v.unknown_id()));
        assert_eq!(v.detokenize(&ids).unwrap(), r);
    }

    #[test]
    fn longest_report_fits() {
        let vars = ClinicalVars {
            age: Some(70.0),
            psa: Some(30.0),
            psad: Some(0.3),
            pv: Some(80.0),
        };
        let zf = ZoneFractions {
            p_pz: 0.2,
            p_cz: 0.3,
            p_out: 0.5,
        };
        let r = build_report(&vars, &zf);
        // one slot is reserved for the class token
        assert!(r.split_whitespace().count() <= 31, "{r}");
    }

    #[test]
    fn vocabulary_is_sorted_and_roundtrips_through_file() {
        let v = Vocabulary::default();
        let mut sorted = v.tokens().to_vec();
        sorted.sort();
        assert_eq!(sorted, v.tokens());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.write(&p).unwrap();
        assert_eq!(Vocabulary::read(&p).unwrap(), v);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("zebra"), vec![v.unknown_id()]);
    }
}
