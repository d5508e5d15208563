//! Off-line compiler from the XML system description to an SHM image and
//! its name sidecar.
//!
//! ```xml
//! <healthmap version="1">
//!   <module id="1" name="CPU" criticality="ZERO">
//!     <instrument id="100" kind="1"/>
//!     <template name="core" count="4" baseId="300" idStride="10">
//!       <module id="0" name="C" criticality="LOW" coreId="0">
//!         <module id="1" name="FPU" criticality="LOW"/>
//!       </module>
//!     </template>
//!   </module>
//!   <dependency provider="1" dependent="300" severity="LOW"/>
//! </healthmap>
//! ```
//!
//! Nesting gives the parent relation. Inside a template, instance `k` gets
//! module and instrument ids `baseId + k·idStride + id`, `coreId + k`, and
//! `{i}` in names replaced by `k`; a top-level template module whose name
//! has no `{i}` gets `k` appended (`C` becomes `C0`, `C1`, ...).

use std::collections::HashMap;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::model::{HealthMap, MapError, ModuleId, Severity};
use crate::shm::{self, EncodeError};
use crate::symbols::{Symbol, SymbolTable};

/// 1-based line and column in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Position {
    pub line: usize,
    pub column: usize,
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IdKind {
    Module,
    Instrument,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("{pos}: XML syntax error: {message}")]
    XmlSyntax { pos: Position, message: String },
    #[error("{pos}: {message}")]
    SchemaViolation { pos: Position, message: String },
    #[error("duplicate {kind:?} id {id} at {second} (first defined at {first})")]
    DuplicateId {
        kind: IdKind,
        id: u32,
        first: Position,
        second: Position,
    },
    #[error("{pos}: reference to undefined module {id}")]
    UnresolvedReference { pos: Position, id: u32 },
    #[error("{pos}: invalid value {value:?} for attribute {attribute}")]
    BadEnumValue {
        pos: Position,
        attribute: String,
        value: String,
    },
    #[error("template instances produce {kind:?} id {id} twice ({first} and {second})")]
    IdRangeCollision {
        kind: IdKind,
        id: u32,
        first: Position,
        second: Position,
    },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentDecl {
    pub id: u32,
    pub kind: u8,
    pub pos: Position,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleDecl {
    pub id: u32,
    pub name: String,
    pub criticality: Severity,
    pub core_id: Option<u32>,
    pub instruments: Vec<InstrumentDecl>,
    pub children: Vec<Item>,
    pub pos: Position,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateDecl {
    pub name: String,
    pub count: u32,
    pub base_id: u32,
    pub id_stride: u32,
    pub body: Vec<ModuleDecl>,
    pub pos: Position,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Module(ModuleDecl),
    Template(TemplateDecl),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyDecl {
    pub provider: u32,
    pub dependent: u32,
    pub severity: Severity,
    pub pos: Position,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HmDescription {
    pub items: Vec<Item>,
    pub dependencies: Vec<DependencyDecl>,
}

/// Result of compiling a description.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub map: HealthMap,
    pub image: Vec<u8>,
    pub symbols: SymbolTable,
}

struct Source<'a> {
    text: &'a str,
    line_starts: Vec<usize>,
}

impl<'a> Source<'a> {
    fn new(text: &'a str) -> Self {
        let mut line_starts = vec![0];
        line_starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        Self { text, line_starts }
    }

    /// Position of the first non-whitespace byte at or after `offset`.
    fn position(&self, offset: usize) -> Position {
        let offset = offset.min(self.text.len());
        let skipped = self.text[offset..]
            .find(|c: char| !c.is_whitespace())
            .map_or(self.text.len(), |i| offset + i);
        let line = self.line_starts.partition_point(|&s| s <= skipped);
        let start = self.line_starts[line - 1];
        Position {
            line,
            column: self.text[start..skipped].chars().count() + 1,
        }
    }
}

struct Attrs {
    pos: Position,
    element: String,
    values: Vec<(String, String)>,
}

impl Attrs {
    fn read(e: &BytesStart<'_>, pos: Position) -> Result<Self, CompileError> {
        let element = String::from_utf8_lossy(e.name().as_ref()).into_owned();
        let mut values = Vec::new();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| CompileError::XmlSyntax {
                pos,
                message: err.to_string(),
            })?;
            let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
            let value = attr
                .unescape_value()
                .map_err(|err| CompileError::XmlSyntax {
                    pos,
                    message: err.to_string(),
                })?
                .into_owned();
            values.push((key, value));
        }
        Ok(Self {
            pos,
            element,
            values,
        })
    }

    fn only(&self, allowed: &[&str]) -> Result<(), CompileError> {
        match self.values.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, _)) => Err(self.violation(format!(
                "unexpected attribute {k:?} on <{}>",
                self.element
            ))),
            None => Ok(()),
        }
    }

    fn violation(&self, message: String) -> CompileError {
        CompileError::SchemaViolation {
            pos: self.pos,
            message,
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, CompileError> {
        self.get(key).ok_or_else(|| {
            self.violation(format!("<{}> requires attribute {key:?}", self.element))
        })
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T, CompileError> {
        let raw = self.required(key)?;
        raw.parse().map_err(|_| {
            self.violation(format!("attribute {key:?} has invalid number {raw:?}"))
        })
    }

    fn optional_number<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CompileError> {
        self.get(key).map(|_| self.number(key)).transpose()
    }

    fn severity(&self, key: &str, allow_zero: bool) -> Result<Severity, CompileError> {
        let raw = self.required(key)?;
        let bad = || CompileError::BadEnumValue {
            pos: self.pos,
            attribute: key.to_string(),
            value: raw.to_string(),
        };
        // Enumeration names are case-sensitive in the document.
        let sev = Severity::ALL
            .iter()
            .copied()
            .find(|s| s.as_str() == raw)
            .ok_or_else(bad)?;
        if sev == Severity::Zero && !allow_zero {
            return Err(bad());
        }
        Ok(sev)
    }

    fn name(&self) -> Result<String, CompileError> {
        let raw = self.required("name")?;
        if raw.is_empty() || raw.contains('.') || raw.chars().any(char::is_whitespace) {
            return Err(self.violation(format!(
                "name {raw:?} must be non-empty without dots or whitespace"
            )));
        }
        Ok(raw.to_string())
    }
}

enum Frame {
    Root,
    Module(ModuleDecl),
    Template(TemplateDecl),
    Instrument(InstrumentDecl),
    Dependency(DependencyDecl),
}

/// Parses and validates a description. The returned description keeps
/// templates unexpanded; validation runs against the expanded form.
pub fn parse_description(xml: &str) -> Result<HmDescription, CompileError> {
    let desc = parse_unchecked(xml)?;
    let flat = expand_templates(&desc)?;
    check_flat(&flat)?;
    Ok(desc)
}

fn parse_unchecked(xml: &str) -> Result<HmDescription, CompileError> {
    let src = Source::new(xml);
    let mut reader = Reader::from_str(xml);
    reader.config_mut().trim_text(true);

    let mut desc = HmDescription::default();
    let mut stack: Vec<Frame> = Vec::new();
    let mut seen_root = false;

    loop {
        let before = reader.buffer_position() as usize;
        let event = reader.read_event().map_err(|err| CompileError::XmlSyntax {
            pos: src.position(reader.error_position() as usize),
            message: err.to_string(),
        })?;
        let pos = src.position(before);
        match event {
            Event::Start(e) => {
                let frame = open_element(&e, pos, &stack, &mut seen_root)?;
                stack.push(frame);
            }
            Event::Empty(e) => {
                let frame = open_element(&e, pos, &stack, &mut seen_root)?;
                close_element(frame, &mut stack, &mut desc);
            }
            Event::End(_) => {
                let frame = stack.pop().ok_or(CompileError::XmlSyntax {
                    pos,
                    message: "unbalanced end tag".into(),
                })?;
                close_element(frame, &mut stack, &mut desc);
            }
            Event::Text(t) => {
                let text = t.unescape().map_err(|err| CompileError::XmlSyntax {
                    pos,
                    message: err.to_string(),
                })?;
                if !text.trim().is_empty() {
                    return Err(CompileError::SchemaViolation {
                        pos,
                        message: "unexpected text content".into(),
                    });
                }
            }
            Event::CData(_) => {
                return Err(CompileError::SchemaViolation {
                    pos,
                    message: "unexpected CDATA".into(),
                })
            }
            Event::DocType(_) => {
                return Err(CompileError::SchemaViolation {
                    pos,
                    message: "DOCTYPE declarations are not supported".into(),
                })
            }
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) => {}
            Event::Eof => break,
        }
    }
    if !stack.is_empty() {
        return Err(CompileError::XmlSyntax {
            pos: src.position(xml.len()),
            message: "unexpected end of document".into(),
        });
    }
    if !seen_root {
        return Err(CompileError::SchemaViolation {
            pos: src.position(0),
            message: "missing <healthmap> root element".into(),
        });
    }
    Ok(desc)
}

fn open_element(
    e: &BytesStart<'_>,
    pos: Position,
    stack: &[Frame],
    seen_root: &mut bool,
) -> Result<Frame, CompileError> {
    let attrs = Attrs::read(e, pos)?;
    let misplaced = || {
        attrs.violation(format!("<{}> is not allowed here", attrs.element))
    };
    match attrs.element.as_str() {
        "healthmap" => {
            if !stack.is_empty() || *seen_root {
                return Err(misplaced());
            }
            *seen_root = true;
            attrs.only(&["version"])?;
            if attrs.required("version")? != "1" {
                return Err(attrs.violation("unsupported healthmap version".into()));
            }
            Ok(Frame::Root)
        }
        "module" => {
            if !matches!(
                stack.last(),
                Some(Frame::Root | Frame::Module(_) | Frame::Template(_))
            ) {
                return Err(misplaced());
            }
            attrs.only(&["id", "name", "criticality", "coreId"])?;
            Ok(Frame::Module(ModuleDecl {
                id: attrs.number("id")?,
                name: attrs.name()?,
                criticality: attrs.severity("criticality", true)?,
                core_id: attrs.optional_number("coreId")?,
                instruments: Vec::new(),
                children: Vec::new(),
                pos,
            }))
        }
        "instrument" => {
            let Some(Frame::Module(_)) = stack.last() else {
                return Err(misplaced());
            };
            attrs.only(&["id", "kind"])?;
            Ok(Frame::Instrument(InstrumentDecl {
                id: attrs.number("id")?,
                kind: attrs.number("kind")?,
                pos,
            }))
        }
        "dependency" => {
            let Some(Frame::Root) = stack.last() else {
                return Err(misplaced());
            };
            attrs.only(&["provider", "dependent", "severity"])?;
            Ok(Frame::Dependency(DependencyDecl {
                provider: attrs.number("provider")?,
                dependent: attrs.number("dependent")?,
                severity: attrs.severity("severity", false)?,
                pos,
            }))
        }
        "template" => {
            if !matches!(stack.last(), Some(Frame::Root | Frame::Module(_)))
                || stack.iter().any(|f| matches!(f, Frame::Template(_)))
            {
                return Err(misplaced());
            }
            attrs.only(&["name", "count", "baseId", "idStride"])?;
            Ok(Frame::Template(TemplateDecl {
                name: attrs.required("name")?.to_string(),
                count: attrs.number("count")?,
                base_id: attrs.number("baseId")?,
                id_stride: attrs.number("idStride")?,
                body: Vec::new(),
                pos,
            }))
        }
        _ => Err(attrs.violation(format!("unknown element <{}>", attrs.element))),
    }
}

fn close_element(frame: Frame, stack: &mut [Frame], desc: &mut HmDescription) {
    match frame {
        Frame::Root => {}
        Frame::Instrument(i) => {
            if let Some(Frame::Module(m)) = stack.last_mut() {
                m.instruments.push(i);
            }
        }
        Frame::Dependency(d) => desc.dependencies.push(d),
        Frame::Module(m) => match stack.last_mut() {
            Some(Frame::Module(parent)) => parent.children.push(Item::Module(m)),
            Some(Frame::Template(t)) => t.body.push(m),
            _ => desc.items.push(Item::Module(m)),
        },
        Frame::Template(t) => match stack.last_mut() {
            Some(Frame::Module(parent)) => parent.children.push(Item::Template(t)),
            _ => desc.items.push(Item::Template(t)),
        },
    }
}

/// Materializes every template instance in place.
pub fn expand_templates(desc: &HmDescription) -> Result<HmDescription, CompileError> {
    let mut ctx = Expansion::default();
    let items = ctx.expand_items(&desc.items)?;
    Ok(HmDescription {
        items,
        dependencies: desc.dependencies.clone(),
    })
}

#[derive(Default)]
struct Expansion {
    serial: usize,
    /// Ids produced by template instances: (kind, id) -> (serial, instance, template position).
    produced: HashMap<(IdKind, u32), (usize, u32, Position)>,
}

impl Expansion {
    fn expand_items(&mut self, items: &[Item]) -> Result<Vec<Item>, CompileError> {
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            match item {
                Item::Module(m) => {
                    let mut m = m.clone();
                    m.children = self.expand_items(&m.children)?;
                    out.push(Item::Module(m));
                }
                Item::Template(t) => {
                    self.serial += 1;
                    for k in 0..t.count {
                        let offset = k
                            .checked_mul(t.id_stride)
                            .and_then(|o| o.checked_add(t.base_id))
                            .ok_or_else(|| overflow(t.pos))?;
                        for body in &t.body {
                            let inst = self.instantiate(body, t, k, offset, true)?;
                            out.push(Item::Module(inst));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn claim(&mut self, kind: IdKind, id: u32, t: &TemplateDecl, k: u32) -> Result<(), CompileError> {
        match self.produced.get(&(kind, id)) {
            Some(&(serial, inst, first)) if (serial, inst) != (self.serial, k) => {
                Err(CompileError::IdRangeCollision {
                    kind,
                    id,
                    first,
                    second: t.pos,
                })
            }
            Some(_) => Ok(()),
            None => {
                self.produced.insert((kind, id), (self.serial, k, t.pos));
                Ok(())
            }
        }
    }

    fn instantiate(
        &mut self,
        m: &ModuleDecl,
        t: &TemplateDecl,
        k: u32,
        offset: u32,
        top: bool,
    ) -> Result<ModuleDecl, CompileError> {
        let id = m.id.checked_add(offset).ok_or_else(|| overflow(m.pos))?;
        self.claim(IdKind::Module, id, t, k)?;
        let mut name = m.name.replace("{i}", &k.to_string());
        if top && !m.name.contains("{i}") {
            name.push_str(&k.to_string());
        }
        let core_id = m
            .core_id
            .map(|c| c.checked_add(k).ok_or_else(|| overflow(m.pos)))
            .transpose()?;
        let mut instruments = Vec::with_capacity(m.instruments.len());
        for i in &m.instruments {
            let iid = i.id.checked_add(offset).ok_or_else(|| overflow(i.pos))?;
            self.claim(IdKind::Instrument, iid, t, k)?;
            instruments.push(InstrumentDecl { id: iid, ..i.clone() });
        }
        let mut children = Vec::with_capacity(m.children.len());
        for c in &m.children {
            match c {
                Item::Module(c) => {
                    children.push(Item::Module(self.instantiate(c, t, k, offset, false)?))
                }
                Item::Template(inner) => {
                    return Err(CompileError::SchemaViolation {
                        pos: inner.pos,
                        message: "templates cannot be nested".into(),
                    })
                }
            }
        }
        Ok(ModuleDecl {
            id,
            name,
            criticality: m.criticality,
            core_id,
            instruments,
            children,
            pos: m.pos,
        })
    }
}

fn overflow(pos: Position) -> CompileError {
    CompileError::SchemaViolation {
        pos,
        message: "template id arithmetic overflows 32 bits".into(),
    }
}

/// Uniqueness and reference checks on an expanded description.
fn check_flat(flat: &HmDescription) -> Result<(), CompileError> {
    let mut modules: HashMap<u32, Position> = HashMap::new();
    let mut instruments: HashMap<u32, Position> = HashMap::new();
    let mut cores: HashMap<u32, Position> = HashMap::new();
    let mut names: HashMap<String, Position> = HashMap::new();

    fn walk(
        items: &[Item],
        prefix: &str,
        f: &mut impl FnMut(&ModuleDecl, &str) -> Result<(), CompileError>,
    ) -> Result<(), CompileError> {
        for item in items {
            match item {
                Item::Module(m) => {
                    let dotted = if prefix.is_empty() {
                        m.name.clone()
                    } else {
                        format!("{prefix}.{}", m.name)
                    };
                    f(m, &dotted)?;
                    walk(&m.children, &dotted, f)?;
                }
                Item::Template(t) => {
                    return Err(CompileError::SchemaViolation {
                        pos: t.pos,
                        message: "unexpanded template".into(),
                    })
                }
            }
        }
        Ok(())
    }

    walk(&flat.items, "", &mut |m, dotted| {
        if let Some(&first) = modules.get(&m.id) {
            return Err(CompileError::DuplicateId {
                kind: IdKind::Module,
                id: m.id,
                first,
                second: m.pos,
            });
        }
        modules.insert(m.id, m.pos);
        for i in &m.instruments {
            if let Some(&first) = instruments.get(&i.id) {
                return Err(CompileError::DuplicateId {
                    kind: IdKind::Instrument,
                    id: i.id,
                    first,
                    second: i.pos,
                });
            }
            instruments.insert(i.id, i.pos);
        }
        if let Some(c) = m.core_id {
            if let Some(first) = cores.insert(c, m.pos) {
                return Err(CompileError::SchemaViolation {
                    pos: m.pos,
                    message: format!("coreId {c} already used at {first}"),
                });
            }
        }
        if let Some(first) = names.insert(dotted.to_string(), m.pos) {
            return Err(CompileError::SchemaViolation {
                pos: m.pos,
                message: format!("module name {dotted} already used at {first}"),
            });
        }
        Ok(())
    })?;

    for d in &flat.dependencies {
        for id in [d.provider, d.dependent] {
            if !modules.contains_key(&id) {
                return Err(CompileError::UnresolvedReference { pos: d.pos, id });
            }
        }
        if d.provider == d.dependent {
            return Err(CompileError::SchemaViolation {
                pos: d.pos,
                message: format!("module {} cannot depend on itself", d.provider),
            });
        }
    }
    Ok(())
}

/// Builds the Health Map and sidecar from a description, expanding
/// templates first.
pub fn build(desc: &HmDescription) -> Result<(HealthMap, SymbolTable), CompileError> {
    let flat = expand_templates(desc)?;
    check_flat(&flat)?;
    let mut map = HealthMap::new();
    let mut symbols = SymbolTable::new();

    fn add(
        items: &[Item],
        parent: Option<(ModuleId, &str)>,
        map: &mut HealthMap,
        symbols: &mut SymbolTable,
    ) -> Result<(), CompileError> {
        for item in items {
            let Item::Module(m) = item else { continue };
            map.add_module(m.id, parent.map(|p| p.0), m.criticality)?;
            for i in &m.instruments {
                map.add_diag_resource(m.id, i.id, i.kind)?;
            }
            let name = match parent {
                Some((_, prefix)) => format!("{prefix}.{}", m.name),
                None => m.name.clone(),
            };
            symbols
                .insert(Symbol {
                    module: m.id,
                    name: name.clone(),
                    core_id: m.core_id,
                })
                .map_err(|e| CompileError::SchemaViolation {
                    pos: m.pos,
                    message: e.to_string(),
                })?;
            add(&m.children, Some((m.id, &name)), map, symbols)?;
        }
        Ok(())
    }

    add(&flat.items, None, &mut map, &mut symbols)?;
    for d in &flat.dependencies {
        map.add_dependency(d.provider, d.dependent, d.severity)?;
    }
    Ok((map, symbols))
}

/// Compiles a description into a fault-free image plus its sidecar.
pub fn compile(desc: &HmDescription) -> Result<Compiled, CompileError> {
    let (map, symbols) = build(desc)?;
    let image = shm::serialize(&map)?;
    Ok(Compiled {
        map,
        image,
        symbols,
    })
}

/// Parses and compiles XML text in one step.
pub fn compile_str(xml: &str) -> Result<Compiled, CompileError> {
    compile(&parse_description(xml)?)
}
