//! Module name sidecar (`.sym`): one line per module,
//! `<id> <dotted-name> [core=<coreId>]`.
//!
//! Names are not stored in the binary image; the sidecar is what lets
//! reports and affinity masks speak in terms of `CPU.C0.FPU` and OS core ids.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::ModuleId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub module: ModuleId,
    pub name: String,
    pub core_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SymbolError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("module {0} has more than one name")]
    DuplicateId(ModuleId),
    #[error("name {0:?} is used by more than one module")]
    DuplicateName(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<Symbol>,
    by_id: HashMap<ModuleId, usize>,
    by_name: HashMap<String, usize>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, symbol: Symbol) -> Result<(), SymbolError> {
        if self.by_id.contains_key(&symbol.module) {
            return Err(SymbolError::DuplicateId(symbol.module));
        }
        if self.by_name.contains_key(&symbol.name) {
            return Err(SymbolError::DuplicateName(symbol.name));
        }
        let pos = self.symbols.len();
        self.by_id.insert(symbol.module, pos);
        self.by_name.insert(symbol.name.clone(), pos);
        self.symbols.push(symbol);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Symbol> {
        self.symbols.iter()
    }

    pub fn name(&self, id: ModuleId) -> Option<&str> {
        self.by_id.get(&id).map(|&i| self.symbols[i].name.as_str())
    }

    pub fn core_id(&self, id: ModuleId) -> Option<u32> {
        self.by_id.get(&id).and_then(|&i| self.symbols[i].core_id)
    }

    pub fn module_named(&self, name: &str) -> Option<ModuleId> {
        self.by_name.get(name).map(|&i| self.symbols[i].module)
    }

    /// Processing-core modules with their OS core ids.
    pub fn cores(&self) -> impl Iterator<Item = (&Symbol, u32)> {
        self.symbols
            .iter()
            .filter_map(|s| s.core_id.map(|c| (s, c)))
    }

    pub fn parse(text: &str) -> Result<Self, SymbolError> {
        let mut table = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let syntax = |message: &str| SymbolError::Syntax {
                line,
                message: message.to_string(),
            };
            let mut parts = content.split_whitespace();
            let module = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| syntax("expected a numeric module id"))?;
            let name = parts
                .next()
                .ok_or_else(|| syntax("expected a module name"))?
                .to_string();
            let core_id = match parts.next() {
                None => None,
                Some(tok) => Some(
                    tok.strip_prefix("core=")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| syntax("expected core=<id>"))?,
                ),
            };
            if parts.next().is_some() {
                return Err(syntax("trailing tokens"));
            }
            table.insert(Symbol {
                module,
                name,
                core_id,
            })?;
        }
        Ok(table)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            match s.core_id {
                Some(c) => writeln!(out, "{} {} core={}", s.module, s.name, c),
                None => writeln!(out, "{} {}", s.module, s.name),
            }
            .expect("write to String");
        }
        out
    }
}
