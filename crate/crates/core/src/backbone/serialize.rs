//! Rendering of observations as template sentences.

use std::fmt::Write;

use crate::envs::EnvId;
use crate::error::{shape_err, Error, Result};

/// Sentence template for one observation layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Env(EnvId),
    /// `observation v0 v1 ...` for an arbitrary dimension.
    Generic(usize),
}

const CARTPOLE: [&str; 4] = [
    "cart position",
    "velocity",
    "pole angle",
    "angular velocity",
];
const MOUNTAINCAR: [&str; 2] = ["car position", "velocity"];
const ACROBOT: [&str; 6] = [
    "link one cosine",
    "sine",
    "link two cosine",
    "sine",
    "angular velocity one",
    "two",
];
const TEXTGRID: [&str; 4] = ["agent row", "column", "target row", "column"];

impl Template {
    pub fn dim(self) -> usize {
        match self {
            Template::Env(id) => id.obs_dim(),
            Template::Generic(n) => n,
        }
    }

    fn labels(self) -> &'static [&'static str] {
        match self {
            Template::Env(EnvId::CartPole) => &CARTPOLE,
            Template::Env(EnvId::MountainCar) => &MOUNTAINCAR,
            Template::Env(EnvId::Acrobot) => &ACROBOT,
            Template::Env(EnvId::TextGrid) => &TEXTGRID,
            Template::Generic(_) => &[],
        }
    }

    /// Every word the template itself can emit.
    pub fn words() -> Vec<&'static str> {
        let mut out = vec!["observation"];
        for labels in [&CARTPOLE[..], &MOUNTAINCAR, &ACROBOT, &TEXTGRID] {
            out.extend(labels.iter().flat_map(|l| l.split_whitespace()));
        }
        out
    }
}

/// Two-decimal fixed-point rendering with round-half-up on hundredths.
///
/// Values that round to zero print as `0.00`, never `-0.00`.
pub fn format_fixed2(v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::Invalid(format!(
            "cannot serialize non-finite value {v}"
        )));
    }
    let centi = (v * 100.0 + 0.5).floor();
    if centi.abs() > 1e15 {
        return Err(Error::Invalid(format!("value {v} too large to serialize")));
    }
    let c = centi as i64;
    let sign = if c < 0 { "-" } else { "" };
    let a = c.unsigned_abs();
    Ok(format!("{sign}{}.{:02}", a / 100, a % 100))
}

/// Renders `obs` into its template sentence, prefixed by `instruction` if given.
pub fn serialize_state(
    template: Template,
    obs: &[f64],
    instruction: Option<&str>,
) -> Result<String> {
    if obs.len() != template.dim() {
        return shape_err(format!(
            "template expects {} values, observation has {}",
            template.dim(),
            obs.len()
        ));
    }
    let mut out = String::new();
    if let Some(text) = instruction {
        out.push_str(text.trim());
    }
    let mut push = |s: &str| {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(s);
    };
    match template {
        Template::Generic(_) => {
            push("observation");
            for &v in obs {
                push(&format_fixed2(v)?);
            }
        }
        Template::Env(_) => {
            for (label, &v) in template.labels().iter().zip(obs) {
                let mut slot = String::new();
                write!(slot, "{label} {}", format_fixed2(v)?).expect("string write");
                push(&slot);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cartpole_zero_state() {
        let s = serialize_state(Template::Env(EnvId::CartPole), &[0.0; 4], None).unwrap();
        assert_eq!(
            s,
            "cart position 0.00 velocity 0.00 pole angle 0.00 angular velocity 0.00"
        );
    }

    #[test]
    fn cartpole_example_values() {
        let s = serialize_state(
            Template::Env(EnvId::CartPole),
            &[0.12, -0.45, 0.03, 0.21],
            None,
        )
        .unwrap();
        assert_eq!(
            s,
            "cart position 0.12 velocity -0.45 pole angle 0.03 angular velocity 0.21"
        );
    }

    #[test]
    fn fixed_point_rounding() {
        assert_eq!(format_fixed2(-0.001).unwrap(), "0.00");
        assert_eq!(format_fixed2(-0.004999).unwrap(), "0.00");
        assert_eq!(format_fixed2(-0.006).unwrap(), "-0.01");
        assert_eq!(format_fixed2(1.0).unwrap(), "1.00");
        assert_eq!(format_fixed2(-12.346).unwrap(), "-12.35");
        assert_eq!(format_fixed2(3.0).unwrap(), "3.00");
        assert!(format_fixed2(f64::NAN).is_err());
    }

    #[test]
    fn instruction_prefix_and_dimension_check() {
        let s = serialize_state(
            Template::Env(EnvId::TextGrid),
            &[0.0, 0.0, 3.0, 4.0],
            Some("go to the red cell at row 3 column 4"),
        )
        .unwrap();
        assert_eq!(
            s,
            "go to the red cell at row 3 column 4 agent row 0.00 column 0.00 target row 3.00 column 4.00"
        );
        assert!(serialize_state(Template::Env(EnvId::CartPole), &[0.0; 3], None).is_err());
        let g = serialize_state(Template::Generic(2), &[1.5, -2.0], None).unwrap();
        assert_eq!(g, "observation 1.50 -2.00");
    }

    proptest! {
        #[test]
        fn serialization_is_deterministic(obs in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let t = Template::Env(EnvId::CartPole);
            prop_assert_eq!(serialize_state(t, &obs, None).unwrap(), serialize_state(t, &obs, None).unwrap());
        }

        #[test]
        fn hundredth_steps_change_the_text(obs in proptest::collection::vec(-10.0f64..10.0, 4), dim in 0usize..4, delta in 0.01f64..1.0, neg in proptest::bool::ANY) {
            let t = Template::Env(EnvId::CartPole);
            let mut other = obs.clone();
            other[dim] += if neg { -delta } else { delta };
            prop_assert_ne!(serialize_state(t, &obs, None).unwrap(), serialize_state(t, &other, None).unwrap());
        }
    }
}
