//! Host-side input values.
//!
//! Blocks consume structured host data (strings, numbers, lists, maps)
//! before the front end turns it into tensors. `HostValue` is that data
//! model; it is deliberately close to JSON so inputs can be read straight
//! from files.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A structured host value fed to a block.
#[derive(Debug, Clone)]
pub enum HostValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<HostValue>),
    /// Insertion-ordered string-keyed map.
    Map(Vec<(String, HostValue)>),
    Tensor(Tensor),
}

impl HostValue {
    pub fn str(s: &str) -> HostValue {
        HostValue::Str(s.to_string())
    }

    pub fn map(fields: Vec<(&str, HostValue)>) -> HostValue {
        HostValue::Map(fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HostValue::Null => "null",
            HostValue::Bool(_) => "bool",
            HostValue::Int(_) => "int",
            HostValue::Float(_) => "float",
            HostValue::Str(_) => "string",
            HostValue::List(_) => "list",
            HostValue::Map(_) => "map",
            HostValue::Tensor(_) => "tensor",
        }
    }

    /// Looks up a map field by name. On a list, a numeric name indexes
    /// the corresponding element.
    pub fn field(&self, name: &str) -> Result<&HostValue> {
        match self {
            HostValue::Map(fields) => fields
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Input(format!("missing field {name:?} in input map"))),
            HostValue::List(items) => {
                let i: usize = name.parse().map_err(|_| {
                    Error::Input(format!("cannot look up field {name:?} in a list"))
                })?;
                items.get(i).ok_or_else(|| {
                    Error::Input(format!(
                        "list index {i} out of range (length {})",
                        items.len()
                    ))
                })
            }
            other => Err(Error::Input(format!(
                "expected a map with field {name:?}, found {}",
                other.kind()
            ))),
        }
    }

    pub fn as_list(&self) -> Result<&[HostValue]> {
        match self {
            HostValue::List(items) => Ok(items),
            other => Err(Error::Input(format!("expected a list, found {}", other.kind()))),
        }
    }

    pub fn as_str(&self) -> Result<&str> {
        match self {
            HostValue::Str(s) => Ok(s),
            other => Err(Error::Input(format!("expected a string, found {}", other.kind()))),
        }
    }

    pub fn as_int(&self) -> Result<i64> {
        match self {
            HostValue::Int(v) => Ok(*v),
            other => Err(Error::Input(format!("expected an int, found {}", other.kind()))),
        }
    }

    pub fn as_float(&self) -> Result<f64> {
        match self {
            HostValue::Float(v) => Ok(*v),
            HostValue::Int(v) => Ok(*v as f64),
            other => Err(Error::Input(format!("expected a number, found {}", other.kind()))),
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, HostValue::Null)
    }

    /// Converts a JSON value into a host value, preserving map field order.
    pub fn from_json(v: &serde_json::Value) -> HostValue {
        match v {
            serde_json::Value::Null => HostValue::Null,
            serde_json::Value::Bool(b) => HostValue::Bool(*b),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    HostValue::Int(i)
                } else {
                    HostValue::Float(n.as_f64().unwrap_or(f64::NAN))
                }
            }
            serde_json::Value::String(s) => HostValue::Str(s.clone()),
            serde_json::Value::Array(items) => {
                HostValue::List(items.iter().map(HostValue::from_json).collect())
            }
            serde_json::Value::Object(fields) => HostValue::Map(
                fields.iter().map(|(k, v)| (k.clone(), HostValue::from_json(v))).collect(),
            ),
        }
    }
}

impl fmt::Display for HostValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HostValue::Null => write!(f, "null"),
            HostValue::Bool(b) => write!(f, "{b}"),
            HostValue::Int(v) => write!(f, "{v}"),
            HostValue::Float(v) => write!(f, "{v}"),
            HostValue::Str(s) => write!(f, "{s:?}"),
            HostValue::List(items) => {
                write!(f, "[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, "]")
            }
            HostValue::Map(fields) => {
                write!(f, "{{")?;
                for (i, (k, v)) in fields.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{k:?}: {v}")?;
                }
                write!(f, "}}")
            }
            HostValue::Tensor(t) => write!(f, "{t}"),
        }
    }
}

/// Key type for dispatching blocks on host values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CaseKey {
    Int(i64),
    Str(String),
}

impl CaseKey {
    pub fn str(s: &str) -> CaseKey {
        CaseKey::Str(s.to_string())
    }
}

impl fmt::Display for CaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseKey::Int(v) => write!(f, "{v}"),
            CaseKey::Str(s) => write!(f, "{s:?}"),
        }
    }
}

/// A host-to-host preprocessing function usable inside a block.
pub type HostFn = Arc<dyn Fn(&HostValue) -> Result<HostValue> + Send + Sync>;

/// A host-to-case-key function used for dispatch.
pub type KeyFn = Arc<dyn Fn(&HostValue) -> Result<CaseKey> + Send + Sync>;
