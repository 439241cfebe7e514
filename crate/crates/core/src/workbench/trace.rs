//! Diagnostics trace files: JSON with every float written to 17 significant
//! digits.
//!
//! ```json
//! {"step": 50, "tasks": ["dino", ...], "layers": ["stage0.embed", ...],
//!  "gradients": [[[...], ...], ...], "expert_profiles": [[[...], ...], ...]}
//! ```
//! `gradients` is `[task][layer][value]`; `expert_profiles` is
//! `[stage][task][expert]` and may be absent.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::diagnostics::{ExpertActivationProfile, GradientTrace};
use crate::error::{ClaspError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub step: u64,
    pub trace: GradientTrace,
    pub profiles: Option<Vec<Vec<ExpertActivationProfile>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrace {
    step: u64,
    tasks: Vec<String>,
    layers: Vec<String>,
    gradients: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    expert_profiles: Option<Vec<Vec<Vec<f64>>>>,
}

fn push_floats(out: &mut String, xs: &[f64]) -> Result<()> {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(ClaspError::Numeric("trace value".into()));
        }
        if i > 0 {
            out.push(',');
        }
        write!(out, "{x:.16e}").expect("write to string");
    }
    out.push(']');
    Ok(())
}

fn push_nested(out: &mut String, rows: &[Vec<Vec<f64>>]) -> Result<()> {
    out.push('[');
    for (i, r) in rows.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, xs) in r.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            push_floats(out, xs)?;
        }
        out.push(']');
    }
    out.push(']');
    Ok(())
}

pub fn encode_trace(t: &TraceFile) -> Result<String> {
    t.trace.validate()?;
    let mut out = String::new();
    write!(out, "{{\"step\":{},\"tasks\":", t.step).expect("write to string");
    out.push_str(&serde_json::to_string(&t.trace.tasks)?);
    out.push_str(",\"layers\":");
    out.push_str(&serde_json::to_string(&t.trace.layers)?);
    out.push_str(",\"gradients\":");
    push_nested(&mut out, &t.trace.gradients)?;
    if let Some(p) = &t.profiles {
        let raw: Vec<Vec<Vec<f64>>> = p.iter().map(|st| st.iter().map(|x| x.probs.clone()).collect()).collect();
        out.push_str(",\"expert_profiles\":");
        push_nested(&mut out, &raw)?;
    }
    out.push_str("}\n");
    Ok(out)
}

pub fn decode_trace(text: &str, path: &Path) -> Result<TraceFile> {
    let raw: RawTrace = serde_json::from_str(text).map_err(|e| ClaspError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let trace = GradientTrace {
        tasks: raw.tasks,
        layers: raw.layers,
        gradients: raw.gradients,
    };
    trace.validate()?;
    let profiles = raw
        .expert_profiles
        .map(|st| {
            st.into_iter()
                .map(|tasks| tasks.into_iter().map(ExpertActivationProfile::new).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(TraceFile {
        step: raw.step,
        trace,
        profiles,
    })
}

pub fn write_trace(t: &TraceFile, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_trace(t)?)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = fs::read_to_string(path).map_err(|e| ClaspError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_trace(&text, path)
}
