//! Tab-separated impression log: `image_id<TAB>label<TAB>idx:val[,idx:val...]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One ad display: which image was shown, the sparse basic features, and the click label.
#[derive(Debug, Clone, PartialEq)]
pub struct Impression {
    pub image_id: String,
    pub label: u8,
    pub features: Vec<(usize, f64)>,
}

impl Impression {
    pub fn new(image_id: impl Into<String>, label: u8, features: Vec<(usize, f64)>) -> Self {
        Impression {
            image_id: image_id.into(),
            label,
            features,
        }
    }
}

pub fn load_impressions(path: &Path, dim: usize) -> Result<Vec<Impression>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_impressions(&text, dim, path)
}

/// Parses log text; `origin` is only used in error messages.
pub fn parse_impressions(text: &str, dim: usize, origin: &Path) -> Result<Vec<Impression>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            msg,
        };
        let mut fields = line.split('\t');
        let (Some(id), Some(label), Some(feats), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(err("expected 3 tab-separated fields".into()));
        };
        if id.is_empty() {
            return Err(err("empty image id".into()));
        }
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label {:?} is not 0 or 1", other))),
        };
        let mut features = Vec::new();
        if !feats.is_empty() {
            for pair in feats.split(',') {
                let (i, v) = pair
                    .split_once(':')
                    .ok_or_else(|| err(format!("feature {:?} is not idx:val", pair)))?;
                let i: usize = i.parse().map_err(|_| err(format!("bad feature index {:?}", i)))?;
                let v: f64 = v.parse().map_err(|_| err(format!("bad feature value {:?}", v)))?;
                if i >= dim {
                    return Err(err(format!("feature index {} >= dim {}", i, dim)));
                }
                if !v.is_finite() {
                    return Err(err(format!("non-finite feature value {}", v)));
                }
                if features.iter().any(|&(j, _)| j == i) {
                    return Err(err(format!("duplicate feature index {}", i)));
                }
                features.push((i, v));
            }
        }
        out.push(Impression {
            image_id: id.to_string(),
            label,
            features,
        });
    }
    Ok(out)
}

pub fn format_impressions(impressions: &[Impression]) -> String {
    let mut s = String::new();
    for imp in impressions {
        let _ = write!(s, "{}\t{}\t", imp.image_id, imp.label);
        for (k, (i, v)) in imp.features.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}:{}", i, v);
        }
        s.push('\n');
    }
    s
}

pub fn write_impressions(path: &Path, impressions: &[Impression]) -> Result<()> {
    fs::write(path, format_impressions(impressions)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parse(text: &str, dim: usize) -> Result<Vec<Impression>> {
        parse_impressions(text, dim, Path::new("test.tsv"))
    }

    #[test]
    fn empty_file() {
        assert!(parse("", 10).unwrap().is_empty());
    }

    #[test]
    fn format_example() {
        let imps = parse("img7\t1\t12:1,153:1\n", 200).unwrap();
        assert_eq!(imps, vec![Impression::new("img7", 1, vec![(12, 1.0), (153, 1.0)])]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse("a\t0\t1:1\nb\t2\t1:1\n", 10).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse("a\t0\t10:1\n", 10).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        assert!(parse("a\t0\n", 10).is_err());
        assert!(parse("a\t0\t3\n", 10).is_err());
        assert!(parse("a\t0\t1:1,1:2\n", 10).is_err());
    }

    #[test]
    fn no_features_allowed() {
        let imps = parse("a\t0\t\n", 10).unwrap();
        assert!(imps[0].features.is_empty());
    }

    #[test]
    fn round_trip_10k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 5000;
        let imps: Vec<Impression> = (0..10_000)
            .map(|i| {
                let k = rng.random_range(0..8);
                let idx = rand::seq::index::sample(&mut rng, dim, k).into_vec();
                let feats = idx
                    .into_iter()
                    .map(|j| {
                        (
                            j,
                            if rng.random::<bool>() {
                                1.0
                            } else {
                                rng.random_range(-3.0..3.0)
                            },
                        )
                    })
                    .collect();
                Impression::new(format!("img{}", i % 97), rng.random_range(0..2), feats)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imps.tsv");
        write_impressions(&path, &imps).unwrap();
        assert_eq!(load_impressions(&path, dim).unwrap(), imps);
    }
}
