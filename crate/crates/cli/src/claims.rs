use std::path::Path;

use anyhow::{bail, Context, Result};
use bsdeopt::filtration::read_leaf_csv;
use bsdeopt::{Claim, Tree};

/// Terminal claims: `const:v=1`, `brownian:a=0,b=1,coord=0` (`a + b W_T`),
/// `call:k=0,coord=0` (`max(W_T - k, 0)`), `indicator:leaf=3`, `@file.csv`.
pub fn parse_claim(spec: &str, tree: &Tree) -> Result<Claim> {
    let spec = spec.trim();
    if let Some(path) = spec.strip_prefix('@') {
        let f = std::fs::File::open(Path::new(path)).with_context(|| format!("opening claim file {path}"))?;
        return read_leaf_csv(tree, f).with_context(|| format!("reading claim file {path}"));
    }
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut params = Vec::new();
    for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((k, v)) = part.split_once('=') else { bail!("claim parameter `{part}`: expected key=value") };
        let x: f64 = v.trim().parse().with_context(|| format!("claim parameter `{}`: not a number", k.trim()))?;
        params.push((k.trim().to_string(), x));
    }
    let allowed: &[&str] = match name {
        "const" => &["v"],
        "brownian" => &["a", "b", "coord"],
        "call" => &["k", "coord"],
        "indicator" => &["leaf"],
        _ => bail!("unknown claim `{spec}`"),
    };
    for (k, _) in &params {
        if !allowed.contains(&k.as_str()) {
            bail!("claim parameter `{k}` not accepted by `{name}`");
        }
    }
    let get = |k: &str, d: f64| params.iter().find(|(n, _)| n == k).map_or(d, |(_, v)| *v);
    let coord = |tree: &Tree| -> Result<usize> {
        let c = get("coord", 0.0);
        if c < 0.0 || c.fract() != 0.0 || c as usize >= tree.dims() {
            bail!("claim parameter `coord` must be an integer below {}", tree.dims());
        }
        Ok(c as usize)
    };
    let n = tree.steps();
    Ok(match name {
        "const" => tree.constant(n, get("v", 1.0)),
        "brownian" => {
            let (a, b) = (get("a", 0.0), get("b", 1.0));
            tree.brownian_coord(n, coord(tree)?).map(|w| a + b * w)
        }
        "call" => {
            let k = get("k", 0.0);
            tree.brownian_coord(n, coord(tree)?).map(|w| (w - k).max(0.0))
        }
        "indicator" => {
            let leaf = get("leaf", 0.0);
            if leaf < 0.0 || leaf.fract() != 0.0 || leaf as usize >= tree.leaves() {
                bail!("claim parameter `leaf` must be an integer below {}", tree.leaves());
            }
            tree.leaf_indicator(leaf as usize)
        }
        _ => unreachable!(),
    })
}
