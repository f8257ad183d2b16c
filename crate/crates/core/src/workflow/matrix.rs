use serde_yaml::{Mapping, Value};

use super::{scalar_string, WorkflowError};

fn unsupported(job: &str, reason: impl Into<String>) -> WorkflowError {
    WorkflowError::UnsupportedMatrix {
        job: job.to_string(),
        reason: reason.into(),
    }
}

fn entries<'a>(job: &str, v: Option<&'a Value>, key: &str) -> Result<Vec<&'a Mapping>, WorkflowError> {
    match v {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Sequence(seq)) => seq
            .iter()
            .map(|e| {
                e.as_mapping()
                    .ok_or_else(|| unsupported(job, format!("`{key}` entry is not a mapping")))
            })
            .collect(),
        Some(_) => Err(unsupported(job, format!("`{key}` is not a list"))),
    }
}

/// The first configuration of a job matrix.
///
/// Axes are enumerated in document order with the first axis varying
/// slowest. `exclude` entries remove matching combinations, the first
/// surviving combination is then extended by every compatible `include`
/// entry. If no combination survives (or there are no axes), the first
/// `include` entry is the configuration.
pub fn first_configuration(job: &str, matrix: &Value) -> Result<Mapping, WorkflowError> {
    let Value::Mapping(matrix) = matrix else {
        return Err(unsupported(job, "matrix is an expression"));
    };
    let mut axes: Vec<(Value, &Vec<Value>)> = Vec::new();
    for (key, values) in matrix {
        let name = scalar_string(key).unwrap_or_default();
        if name == "include" || name == "exclude" {
            continue;
        }
        match values {
            Value::Sequence(seq) if !seq.is_empty() => axes.push((key.clone(), seq)),
            Value::Sequence(_) => return Err(unsupported(job, format!("axis `{name}` is empty"))),
            _ => return Err(unsupported(job, format!("axis `{name}` is not a list"))),
        }
    }
    let excludes = entries(job, matrix.get("exclude"), "exclude")?;
    let includes = entries(job, matrix.get("include"), "include")?;

    let first = if axes.is_empty() {
        None
    } else {
        first_surviving(&axes, &excludes)
    };

    let Some(mut config) = first else {
        return includes
            .first()
            .map(|m| (*m).clone())
            .ok_or_else(|| unsupported(job, "every combination is excluded"));
    };

    let axis_keys: Vec<&Value> = axes.iter().map(|(k, _)| k).collect();
    for inc in includes {
        let compatible = inc
            .iter()
            .all(|(k, v)| !axis_keys.contains(&k) || config.get(k) == Some(v));
        if compatible {
            for (k, v) in inc {
                if !axis_keys.contains(&k) {
                    config.insert(k.clone(), v.clone());
                }
            }
        }
    }
    Ok(config)
}

fn first_surviving(axes: &[(Value, &Vec<Value>)], excludes: &[&Mapping]) -> Option<Mapping> {
    let mut idx = vec![0usize; axes.len()];
    loop {
        let combo: Mapping = axes
            .iter()
            .zip(&idx)
            .map(|((k, vs), &i)| (k.clone(), vs[i].clone()))
            .collect();
        let excluded = excludes
            .iter()
            .any(|ex| ex.iter().all(|(k, v)| combo.get(k) == Some(v)));
        if !excluded {
            return Some(combo);
        }
        // odometer increment, last axis fastest
        let mut pos = axes.len();
        loop {
            if pos == 0 {
                return None;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < axes[pos].1.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// The collapsed matrix: one single-valued axis per configuration key.
pub(crate) fn collapse(job: &str, matrix: &Value) -> Result<Mapping, WorkflowError> {
    Ok(first_configuration(job, matrix)?
        .into_iter()
        .map(|(k, v)| (k, Value::Sequence(vec![v])))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(yaml: &str) -> Result<Mapping, WorkflowError> {
        first_configuration("j", &serde_yaml::from_str(yaml).unwrap())
    }

    fn map(yaml: &str) -> Mapping {
        serde_yaml::from_str(yaml).unwrap()
    }

    #[test]
    fn first_value_of_each_axis() {
        let got = cfg("os: [macos, ubuntu]\nversion: ['1.19', '1.20']").unwrap();
        assert_eq!(got, map("os: macos\nversion: '1.19'"));
    }

    #[test]
    fn exclude_skips_to_next_combination() {
        let got = cfg("os: [macos, ubuntu]\ngo: [a, b]\nexclude:\n  - os: macos\n    go: a").unwrap();
        assert_eq!(got, map("os: macos\ngo: b"));
        let got = cfg("os: [macos, ubuntu]\ngo: [a, b]\nexclude:\n  - os: macos").unwrap();
        assert_eq!(got, map("os: ubuntu\ngo: a"));
    }

    #[test]
    fn include_extends_compatible_configuration() {
        let got = cfg(
            "go: [a, b]\ninclude:\n  - go: a\n    experimental: true\n  - go: b\n    race: true\n  - lint: yes",
        )
        .unwrap();
        assert_eq!(got, map("go: a\nexperimental: true\nlint: yes"));
    }

    #[test]
    fn include_only_matrix() {
        let got = cfg("include:\n  - os: linux\n    cc: gcc\n  - os: mac").unwrap();
        assert_eq!(got, map("os: linux\ncc: gcc"));
    }

    #[test]
    fn everything_excluded_without_includes_fails() {
        assert!(cfg("os: [a]\nexclude:\n  - os: a").is_err());
    }

    #[test]
    fn expression_matrix_is_unsupported() {
        assert!(first_configuration("j", &Value::String("${{ fromJSON(x) }}".into())).is_err());
    }

    #[test]
    fn collapse_is_idempotent() {
        let m: Value = serde_yaml::from_str("os: [macos, ubuntu]\ngo: [1, 2]\ninclude:\n  - extra: x").unwrap();
        let once = Value::Mapping(collapse("j", &m).unwrap());
        let twice = Value::Mapping(collapse("j", &once).unwrap());
        assert_eq!(once, twice);
    }

    /// Brute force: enumerate the full product in odometer order and take
    /// the first non-excluded element.
    #[test]
    fn agrees_with_full_enumeration() {
        let oses = ["l", "m", "w"];
        let gos = ["1", "2"];
        let mut product = Vec::new();
        for o in oses {
            for g in gos {
                product.push((o, g));
            }
        }
        for mask in 0u32..(1 << product.len()) {
            let excluded: Vec<_> = product
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, p)| *p)
                .collect();
            let mut yaml = "os: [l, m, w]\ngo: ['1', '2']\nexclude: [".to_string();
            yaml += &excluded
                .iter()
                .map(|(o, g)| format!("{{os: {o}, go: '{g}'}}"))
                .collect::<Vec<_>>()
                .join(", ");
            yaml += "]";
            let expected = product.iter().find(|p| !excluded.contains(p));
            match (cfg(&yaml), expected) {
                (Ok(got), Some((o, g))) => assert_eq!(got, map(&format!("os: {o}\ngo: '{g}'"))),
                (Err(_), None) => {}
                (got, exp) => panic!("mask {mask}: got {got:?}, expected {exp:?}"),
            }
        }
    }
}
