//! Uniform traversal over named parameter tensors.
//!
//! Every parameter-carrying struct implements [`ParamBundle`], which visits
//! each tensor with a dotted path name (for example
//! `backbone.rgb.conv1.weight`). Checkpoint export/import, SGD updates,
//! freeze verification, and parameter counting are all built on this one
//! trait.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};

pub trait ParamBundle {
    /// Visit every parameter tensor with its dotted path name.
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));

    /// Mutable variant of [`ParamBundle::for_each`], same visit order.
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));
}

/// Snapshot all parameters into name-sorted owned arrays.
pub fn export(bundle: &dyn ParamBundle) -> BTreeMap<String, ArrayD<f64>> {
    let mut map = BTreeMap::new();
    bundle.for_each(&mut |name, view| {
        map.insert(name.to_string(), view.to_owned());
    });
    map
}

/// Load parameters from a snapshot. Every tensor in the bundle must be
/// present with a matching shape, and no extra entries may remain.
pub fn import(bundle: &mut dyn ParamBundle, map: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut missing = Vec::new();
    let mut used = 0usize;
    let mut shape_err: Option<String> = None;
    bundle.for_each_mut(&mut |name, mut view| {
        match map.get(name) {
            Some(src) => {
                used += 1;
                if src.shape() != view.shape() {
                    if shape_err.is_none() {
                        shape_err = Some(format!(
                            "tensor {name}: stored shape {:?}, expected {:?}",
                            src.shape(),
                            view.shape()
                        ));
                    }
                } else {
                    view.assign(src);
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::CheckpointFormat(msg));
    }
    if !missing.is_empty() {
        return Err(Error::CheckpointFormat(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }
    if used != map.len() {
        let known: std::collections::BTreeSet<String> = {
            let mut s = std::collections::BTreeSet::new();
            bundle.for_each(&mut |name, _| {
                s.insert(name.to_string());
            });
            s
        };
        let extra: Vec<&String> = map.keys().filter(|k| !known.contains(*k)).collect();
        return Err(Error::CheckpointFormat(format!(
            "unexpected tensors: {}",
            extra
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    Ok(())
}

/// Total number of scalar parameters.
pub fn param_count(bundle: &dyn ParamBundle) -> usize {
    let mut n = 0;
    bundle.for_each(&mut |_, view| n += view.len());
    n
}

/// True when both bundles hold exactly the same tensors with bitwise
/// identical contents.
pub fn bitwise_equal(a: &dyn ParamBundle, b: &dyn ParamBundle) -> bool {
    let ea = export(a);
    let eb = export(b);
    if ea.len() != eb.len() {
        return false;
    }
    ea.iter().zip(eb.iter()).all(|((na, ta), (nb, tb))| {
        na == nb
            && ta.shape() == tb.shape()
            && ta
                .iter()
                .zip(tb.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

/// Set every parameter to zero.
pub fn zero_all(bundle: &mut dyn ParamBundle) {
    bundle.for_each_mut(&mut |_, mut view| view.fill(0.0));
}

/// Names of tensors that differ bitwise between two bundles of the same
/// structure. Useful in freeze-contract tests for pinpointing leaks.
pub fn diff_names(a: &dyn ParamBundle, b: &dyn ParamBundle) -> Vec<String> {
    let ea = export(a);
    let eb = export(b);
    let mut out = Vec::new();
    for (name, ta) in &ea {
        match eb.get(name) {
            Some(tb)
                if ta.shape() == tb.shape()
                    && ta
                        .iter()
                        .zip(tb.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits()) => {}
            _ => out.push(name.clone()),
        }
    }
    for name in eb.keys() {
        if !ea.contains_key(name) {
            out.push(name.clone());
        }
    }
    out.sort();
    out.dedup();
    out
}
