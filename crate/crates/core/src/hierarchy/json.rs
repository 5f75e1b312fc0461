//! JSON reading and writing of signal hierarchies.
//!
//! ```text
//! {"dim": int, "pos_dim": int, "root": <node>}
//! <node>  = {"domain": "set"|"grid1d"|"keyvalue"|"custom", "children": [<child>...]}
//!         | {"leaf": {"x": [float...]}}            (root only)
//! <child> = {"pos": [float...], "leaf": {"x": [float...], "tag"?: string}}
//!         | {"pos": [float...], "node": <node>}
//! ```

use super::{ChildSpec, DomainKind, NodeKind, NodeSpec, SignalHierarchy};
use crate::error::{HsaError, Result};
use crate::numeric::to_json_sig17;
use serde::Serialize;
use serde_json::{Map, Value};

impl SignalHierarchy {
    pub fn from_json(document: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(document)?;
        let top = as_object(&value, "document")?;
        let dim = get_usize(top, "dim", "document")?;
        let pos_dim = get_usize(top, "pos_dim", "document")?;
        let root = top.get("root").ok_or_else(|| missing("root", "document"))?;
        let spec = parse_node(root, "root", true)?;
        SignalHierarchy::from_spec(dim, pos_dim, spec)
    }

    /// Canonical compact JSON: children in leaf order, floats at 17
    /// significant digits.
    pub fn to_json(&self) -> String {
        let doc = DocOut {
            dim: self.dim,
            pos_dim: self.pos_dim,
            root: self.node_out(self.root()),
        };
        to_json_sig17(&doc).expect("hierarchy serialization cannot fail")
    }

    fn node_out(&self, id: usize) -> NodeOut<'_> {
        match &self.nodes[id].kind {
            NodeKind::Leaf { features, tag } => NodeOut::Leaf {
                leaf: LeafOut {
                    x: features,
                    tag: tag.as_deref(),
                },
            },
            NodeKind::Internal { domain, children } => NodeOut::Internal {
                domain: *domain,
                children: children
                    .iter()
                    .map(|&c| {
                        let pos = self.nodes[c].position.as_slice();
                        match self.node_out(c) {
                            NodeOut::Leaf { leaf } => ChildOut::Leaf { pos, leaf },
                            node => ChildOut::Node { pos, node },
                        }
                    })
                    .collect(),
            },
        }
    }
}

#[derive(Serialize)]
struct DocOut<'a> {
    dim: usize,
    pos_dim: usize,
    root: NodeOut<'a>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum NodeOut<'a> {
    Internal { domain: DomainKind, children: Vec<ChildOut<'a>> },
    Leaf { leaf: LeafOut<'a> },
}

#[derive(Serialize)]
#[serde(untagged)]
enum ChildOut<'a> {
    Leaf { pos: &'a [f64], leaf: LeafOut<'a> },
    Node { pos: &'a [f64], node: NodeOut<'a> },
}

#[derive(Serialize)]
struct LeafOut<'a> {
    x: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    tag: Option<&'a str>,
}

fn missing(field: &str, at: &str) -> HsaError {
    HsaError::Schema(format!("missing field `{field}` at {at}"))
}

fn as_object<'a>(v: &'a Value, at: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| HsaError::Schema(format!("expected an object at {at}")))
}

fn get_usize(obj: &Map<String, Value>, field: &str, at: &str) -> Result<usize> {
    let v = obj.get(field).ok_or_else(|| missing(field, at))?;
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| HsaError::Schema(format!("`{field}` at {at} must be a non-negative integer")))
}

fn get_floats(obj: &Map<String, Value>, field: &str, at: &str) -> Result<Vec<f64>> {
    let v = obj.get(field).ok_or_else(|| missing(field, at))?;
    let arr = v
        .as_array()
        .ok_or_else(|| HsaError::Schema(format!("`{field}` at {at} must be an array of numbers")))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| HsaError::Schema(format!("non-numeric entry in `{field}` at {at}")))
        })
        .collect()
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], at: &str) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(HsaError::Schema(format!("unknown field `{k}` at {at}"))),
        None => Ok(()),
    }
}

fn parse_leaf(v: &Value, at: &str) -> Result<NodeSpec> {
    let obj = as_object(v, at)?;
    check_keys(obj, &["x", "tag"], at)?;
    let x = get_floats(obj, "x", at)?;
    let tag = match obj.get("tag") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(HsaError::Schema(format!("`tag` at {at} must be a string"))),
    };
    Ok(NodeSpec::Leaf { x, tag })
}

fn parse_node(v: &Value, at: &str, allow_leaf: bool) -> Result<NodeSpec> {
    let obj = as_object(v, at)?;
    if allow_leaf && obj.contains_key("leaf") {
        check_keys(obj, &["leaf"], at)?;
        return parse_leaf(&obj["leaf"], &format!("{at}.leaf"));
    }
    check_keys(obj, &["domain", "children"], at)?;
    let domain = obj
        .get("domain")
        .ok_or_else(|| missing("domain", at))?
        .as_str()
        .ok_or_else(|| HsaError::Schema(format!("`domain` at {at} must be a string")))?;
    let domain = DomainKind::parse(domain)
        .ok_or_else(|| HsaError::Schema(format!("unknown domain `{domain}` at {at}")))?;
    let children = obj
        .get("children")
        .ok_or_else(|| missing("children", at))?
        .as_array()
        .ok_or_else(|| HsaError::Schema(format!("`children` at {at} must be an array")))?;
    let mut out = Vec::with_capacity(children.len());
    for (i, child) in children.iter().enumerate() {
        let cat = format!("{at}/{i}");
        let cobj = as_object(child, &cat)?;
        let pos = get_floats(cobj, "pos", &cat)?;
        let node = match (cobj.get("leaf"), cobj.get("node")) {
            (Some(leaf), None) => {
                check_keys(cobj, &["pos", "leaf"], &cat)?;
                parse_leaf(leaf, &format!("{cat}.leaf"))?
            }
            (None, Some(node)) => {
                check_keys(cobj, &["pos", "node"], &cat)?;
                parse_node(node, &format!("{cat}.node"), false)?
            }
            _ => {
                return Err(HsaError::Schema(format!(
                    "child at {cat} needs exactly one of `leaf` or `node`"
                )))
            }
        };
        out.push(ChildSpec { pos, node });
    }
    Ok(NodeSpec::Internal { domain, children: out })
}
