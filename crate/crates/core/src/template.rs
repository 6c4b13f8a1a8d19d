//! TOSCA-subset deployment templates: parsing, validation and topology queries.
//!
//! ```text
//! tosca_version: indigo_subset_1
//! nodes:
//!   front:
//!     kind: Compute
//!     resources: { cpus: 2, mem_mb: 4096, disk_gb: 100 }
//!   wn:
//!     kind: ElasticCluster
//!     resources: { cpus: 1, mem_mb: 1024, disk_gb: 10 }
//!     min_workers: 1
//!     max_workers: 4
//!     depends_on: [front]
//! outputs:
//!   cluster_endpoint: front
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resource::ResourceVector;
use crate::text::{self, MapReader, Node, SyntaxError};

pub const VERSION_TAG: &str = "indigo_subset_1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Compute,
    Container,
    Service,
    Job,
    ElasticCluster,
}

impl NodeKind {
    pub fn parse(s: &str) -> Option<NodeKind> {
        Some(match s {
            "Compute" => NodeKind::Compute,
            "Container" => NodeKind::Container,
            "Service" => NodeKind::Service,
            "Job" => NodeKind::Job,
            "ElasticCluster" => NodeKind::ElasticCluster,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NodeKind::Compute => "Compute",
            NodeKind::Container => "Container",
            NodeKind::Service => "Service",
            NodeKind::Job => "Job",
            NodeKind::ElasticCluster => "ElasticCluster",
        }
    }

    /// Compute and ElasticCluster nodes claim site capacity; the rest are hosted workloads.
    pub fn holds_resources(&self) -> bool {
        matches!(self, NodeKind::Compute | NodeKind::ElasticCluster)
    }

    fn needs_image(&self) -> bool {
        matches!(self, NodeKind::Container | NodeKind::Service | NodeKind::Job)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    /// Instance size for Compute nodes, per-worker size for ElasticCluster nodes.
    pub resources: Option<ResourceVector>,
    pub image: Option<String>,
    pub preemptible: bool,
    pub bid: Option<f64>,
    pub depends_on: Vec<String>,
    pub min_workers: Option<u32>,
    pub max_workers: Option<u32>,
    pub input_datasets: Vec<String>,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, kind: NodeKind) -> Self {
        Self {
            name: name.into(),
            kind,
            resources: None,
            image: None,
            preemptible: false,
            bid: None,
            depends_on: Vec::new(),
            min_workers: None,
            max_workers: None,
            input_datasets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentTemplate {
    pub version_tag: String,
    pub nodes: BTreeMap<String, NodeSpec>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TemplateError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("node `{node}` has unknown kind `{kind}`")]
    UnknownKind { node: String, kind: String },
    #[error("node `{node}` is missing property `{property}`")]
    MissingProperty { node: String, property: String },
    #[error("node `{node}` does not accept property `{property}`")]
    UnexpectedProperty { node: String, property: String },
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("node `{node}` depends on unknown node `{target}`")]
    DanglingDependency { node: String, target: String },
    #[error("dependency cycle through {0:?}")]
    Cycle(Vec<String>),
}

impl From<SyntaxError> for TemplateError {
    fn from(e: SyntaxError) -> Self {
        TemplateError::Syntax { line: e.line, message: e.message }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation")]
pub enum Violation {
    Cycle { nodes: Vec<String> },
    DanglingDependency { node: String, target: String },
    DanglingOutput { output: String, target: String },
    BidWithoutPreemptible { node: String },
    NegativeBid { node: String },
    MinExceedsMax { node: String, min: u32, max: u32 },
    EmptyImage { node: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { nodes } => write!(f, "dependency cycle through {}", nodes.join(", ")),
            Violation::DanglingDependency { node, target } => {
                write!(f, "node `{node}` depends on unknown node `{target}`")
            }
            Violation::DanglingOutput { output, target } => {
                write!(f, "output `{output}` references unknown node `{target}`")
            }
            Violation::BidWithoutPreemptible { node } => write!(f, "node `{node}` has a bid but is not preemptible"),
            Violation::NegativeBid { node } => write!(f, "node `{node}` has a negative bid"),
            Violation::MinExceedsMax { node, min, max } => {
                write!(f, "node `{node}` has min_workers {min} > max_workers {max}")
            }
            Violation::EmptyImage { node } => write!(f, "node `{node}` has an empty image"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_deployable(&self) -> bool {
        self.violations.is_empty()
    }
}

const NODE_KEYS: &[&str] =
    &["kind", "resources", "image", "preemptible", "bid", "depends_on", "min_workers", "max_workers", "input_datasets"];

pub fn parse_template(text: &str) -> Result<DeploymentTemplate, TemplateError> {
    let root = text::parse(text)?;
    let top = MapReader::new(&root, &["tosca_version", "nodes", "outputs"])?;
    let version_tag = top.require("tosca_version")?.as_str()?.to_owned();
    if version_tag != VERSION_TAG {
        return Err(TemplateError::Syntax {
            line: top.require("tosca_version")?.line,
            message: format!("unsupported tosca_version `{version_tag}`"),
        });
    }

    let mut nodes = BTreeMap::new();
    for entry in top.require("nodes")?.as_map()? {
        if nodes.contains_key(&entry.key) {
            return Err(TemplateError::DuplicateNode(entry.key.clone()));
        }
        let spec = parse_node(&entry.key, &entry.node)?;
        nodes.insert(entry.key.clone(), spec);
    }

    let mut outputs = BTreeMap::new();
    if let Some(out) = top.get("outputs") {
        for entry in out.as_map()? {
            if outputs.contains_key(&entry.key) {
                return Err(TemplateError::Syntax {
                    line: entry.node.line,
                    message: format!("duplicate output `{}`", entry.key),
                });
            }
            outputs.insert(entry.key.clone(), entry.node.as_str()?.to_owned());
        }
    }

    let template = DeploymentTemplate { version_tag, nodes, outputs };
    for node in template.nodes.values() {
        if let Some(target) = node.depends_on.iter().find(|d| !template.nodes.contains_key(*d)) {
            return Err(TemplateError::DanglingDependency { node: node.name.clone(), target: target.clone() });
        }
    }
    if let Some(cycle) = find_cycle(&template) {
        return Err(TemplateError::Cycle(cycle));
    }
    Ok(template)
}

fn parse_node(name: &str, node: &Node) -> Result<NodeSpec, TemplateError> {
    let m = MapReader::new(node, NODE_KEYS)?;
    let kind_str = m.get("kind").ok_or_else(|| missing(name, "kind"))?.as_str()?;
    let kind = NodeKind::parse(kind_str)
        .ok_or_else(|| TemplateError::UnknownKind { node: name.to_owned(), kind: kind_str.to_owned() })?;

    let allowed: &[&str] = match kind {
        NodeKind::Compute => &["kind", "resources", "image", "preemptible", "bid", "depends_on"],
        NodeKind::ElasticCluster => {
            &["kind", "resources", "image", "preemptible", "bid", "depends_on", "min_workers", "max_workers"]
        }
        NodeKind::Container | NodeKind::Service => &["kind", "image", "depends_on"],
        NodeKind::Job => &["kind", "image", "depends_on", "input_datasets"],
    };
    if let Some(bad) = NODE_KEYS.iter().find(|k| !allowed.contains(k) && m.get(k).is_some()) {
        return Err(TemplateError::UnexpectedProperty { node: name.to_owned(), property: (*bad).to_owned() });
    }

    let mut spec = NodeSpec::new(name, kind);
    if let Some(r) = m.get("resources") {
        spec.resources = Some(parse_resources(r)?);
    }
    spec.image = m.get("image").map(|n| n.as_str().map(str::to_owned)).transpose()?;
    spec.preemptible = m.get("preemptible").map(Node::as_bool).transpose()?.unwrap_or(false);
    spec.bid = m.get("bid").map(Node::as_f64).transpose()?;
    spec.depends_on = m.get("depends_on").map(Node::as_str_list).transpose()?.unwrap_or_default();
    spec.input_datasets = m.get("input_datasets").map(Node::as_str_list).transpose()?.unwrap_or_default();
    spec.min_workers = m.get("min_workers").map(as_u32).transpose()?;
    spec.max_workers = m.get("max_workers").map(as_u32).transpose()?;

    if kind.holds_resources() && spec.resources.is_none() {
        return Err(missing(name, "resources"));
    }
    if kind == NodeKind::ElasticCluster {
        if spec.min_workers.is_none() {
            return Err(missing(name, "min_workers"));
        }
        if spec.max_workers.is_none() {
            return Err(missing(name, "max_workers"));
        }
    }
    if kind.needs_image() && spec.image.is_none() {
        return Err(missing(name, "image"));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = spec.depends_on.iter().find(|d| !seen.insert(*d)) {
        return Err(TemplateError::Syntax {
            line: node.line,
            message: format!("node `{name}` lists dependency `{dup}` twice"),
        });
    }
    Ok(spec)
}

fn missing(node: &str, property: &str) -> TemplateError {
    TemplateError::MissingProperty { node: node.to_owned(), property: property.to_owned() }
}

fn as_u32(n: &Node) -> Result<u32, SyntaxError> {
    let v = n.as_u64()?;
    u32::try_from(v).map_err(|_| SyntaxError::new(n.line, format!("{v} is out of range")))
}

pub(crate) fn parse_resources(node: &Node) -> Result<ResourceVector, SyntaxError> {
    let m = MapReader::new(node, &["cpus", "mem_mb", "disk_gb"])?;
    Ok(ResourceVector {
        cpus: m.require("cpus")?.as_u64()?,
        mem_mb: m.require("mem_mb")?.as_u64()?,
        disk_gb: m.require("disk_gb")?.as_u64()?,
    })
}

pub(crate) fn resources_text(r: &ResourceVector) -> String {
    format!("{{ cpus: {}, mem_mb: {}, disk_gb: {} }}", r.cpus, r.mem_mb, r.disk_gb)
}

/// Returns the nodes of some dependency cycle, if one exists.
fn find_cycle(template: &DeploymentTemplate) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Fresh,
        Active,
        Done,
    }
    fn visit<'a>(
        name: &'a str,
        t: &'a DeploymentTemplate,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(name, Mark::Active);
        stack.push(name);
        for dep in &t.nodes[name].depends_on {
            if !t.nodes.contains_key(dep) {
                continue;
            }
            match marks.get(dep.as_str()).copied().unwrap_or(Mark::Fresh) {
                Mark::Active => {
                    let start = stack.iter().position(|n| *n == dep).unwrap_or(0);
                    return Some(stack[start..].iter().map(|s| (*s).to_owned()).collect());
                }
                Mark::Fresh => {
                    if let Some(c) = visit(dep, t, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks.insert(name, Mark::Done);
        None
    }

    let mut marks = BTreeMap::new();
    for name in template.nodes.keys() {
        if marks.get(name.as_str()).copied().unwrap_or(Mark::Fresh) == Mark::Fresh {
            if let Some(c) = visit(name, template, &mut marks, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

/// Lists every violation that would prevent deployment. An empty report means deployable.
pub fn validate(template: &DeploymentTemplate) -> ValidationReport {
    let mut violations = Vec::new();
    for node in template.nodes.values() {
        for dep in &node.depends_on {
            if !template.nodes.contains_key(dep) {
                violations.push(Violation::DanglingDependency { node: node.name.clone(), target: dep.clone() });
            }
        }
        if let Some(bid) = node.bid {
            if !node.preemptible {
                violations.push(Violation::BidWithoutPreemptible { node: node.name.clone() });
            }
            if bid < 0.0 {
                violations.push(Violation::NegativeBid { node: node.name.clone() });
            }
        }
        if let (Some(min), Some(max)) = (node.min_workers, node.max_workers) {
            if min > max {
                violations.push(Violation::MinExceedsMax { node: node.name.clone(), min, max });
            }
        }
        if node.kind.needs_image() && node.image.as_deref().is_none_or(|s| s.trim().is_empty()) {
            violations.push(Violation::EmptyImage { node: node.name.clone() });
        }
    }
    if let Some(nodes) = find_cycle(template) {
        violations.push(Violation::Cycle { nodes });
    }
    for (output, target) in &template.outputs {
        if !template.nodes.contains_key(target) {
            violations.push(Violation::DanglingOutput { output: output.clone(), target: target.clone() });
        }
    }
    ValidationReport { violations }
}

/// Componentwise demand of the whole topology, with elastic clusters at full size.
pub fn aggregate_demand(template: &DeploymentTemplate) -> ResourceVector {
    template
        .nodes
        .values()
        .map(|n| match (n.kind, n.resources) {
            (NodeKind::Compute, Some(r)) => r,
            (NodeKind::ElasticCluster, Some(r)) => r.scale(u64::from(n.max_workers.unwrap_or(0))),
            _ => ResourceVector::ZERO,
        })
        .sum()
}

/// Deployment order: dependencies first, ties broken by node name.
pub fn topological_order(template: &DeploymentTemplate) -> Result<Vec<String>, TemplateError> {
    let mut pending: BTreeMap<&str, usize> = BTreeMap::new();
    let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for node in template.nodes.values() {
        let deps = node.depends_on.iter().filter(|d| template.nodes.contains_key(*d)).count();
        pending.insert(&node.name, deps);
        for dep in &node.depends_on {
            dependents.entry(dep.as_str()).or_default().push(&node.name);
        }
    }
    let mut ready: BTreeSet<&str> = pending.iter().filter(|(_, &n)| n == 0).map(|(k, _)| *k).collect();
    let mut order = Vec::with_capacity(template.nodes.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.to_owned());
        for dependent in dependents.get(next).into_iter().flatten() {
            let n = pending.get_mut(dependent).expect("dependent is a known node");
            *n -= 1;
            if *n == 0 {
                ready.insert(dependent);
            }
        }
    }
    if order.len() != template.nodes.len() {
        let cycle = find_cycle(template).unwrap_or_default();
        return Err(TemplateError::Cycle(cycle));
    }
    Ok(order)
}

impl DeploymentTemplate {
    /// Canonical text form; `parse_template(t.to_text())` reproduces `t`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tosca_version: {}", text::scalar(&self.version_tag));
        if self.nodes.is_empty() {
            out.push_str("nodes: {}\n");
        } else {
            out.push_str("nodes:\n");
        }
        for node in self.nodes.values() {
            let _ = writeln!(out, "  {}:", node.name);
            let _ = writeln!(out, "    kind: {}", node.kind);
            if let Some(r) = &node.resources {
                let _ = writeln!(out, "    resources: {}", resources_text(r));
            }
            if let Some(image) = &node.image {
                let _ = writeln!(out, "    image: {}", text::scalar(image));
            }
            if node.preemptible {
                out.push_str("    preemptible: true\n");
            }
            if let Some(bid) = node.bid {
                let _ = writeln!(out, "    bid: {bid}");
            }
            if !node.depends_on.is_empty() {
                let _ = writeln!(out, "    depends_on: {}", text::flow_list(&node.depends_on));
            }
            if let Some(min) = node.min_workers {
                let _ = writeln!(out, "    min_workers: {min}");
            }
            if let Some(max) = node.max_workers {
                let _ = writeln!(out, "    max_workers: {max}");
            }
            if !node.input_datasets.is_empty() {
                let _ = writeln!(out, "    input_datasets: {}", text::flow_list(&node.input_datasets));
            }
        }
        if !self.outputs.is_empty() {
            out.push_str("outputs:\n");
            for (name, target) in &self.outputs {
                let _ = writeln!(out, "  {name}: {}", text::scalar(target));
            }
        }
        out
    }

    /// Dataset identifiers required by Job nodes, deduplicated and sorted.
    pub fn required_datasets(&self) -> BTreeSet<String> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Job).flat_map(|n| n.input_datasets.iter().cloned()).collect()
    }

    pub fn has_jobs(&self) -> bool {
        self.nodes.values().any(|n| n.kind == NodeKind::Job)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
tosca_version: indigo_subset_1
nodes:
  vm:
    kind: Compute
    resources: { cpus: 2, mem_mb: 4096, disk_gb: 100 }
";

    fn compute(name: &str, r: ResourceVector, deps: &[&str]) -> NodeSpec {
        let mut n = NodeSpec::new(name, NodeKind::Compute);
        n.resources = Some(r);
        n.depends_on = deps.iter().map(|s| s.to_string()).collect();
        n
    }

    fn template(nodes: Vec<NodeSpec>) -> DeploymentTemplate {
        DeploymentTemplate {
            version_tag: VERSION_TAG.into(),
            nodes: nodes.into_iter().map(|n| (n.name.clone(), n)).collect(),
            outputs: BTreeMap::new(),
        }
    }

    #[test]
    fn minimal_compute_template() {
        let t = parse_template(MINIMAL).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert!(t.outputs.is_empty());
        assert_eq!(t.nodes["vm"].resources, Some(ResourceVector::new(2, 4096, 100)));
        assert!(validate(&t).is_deployable());
    }

    #[test]
    fn two_node_cycle_is_rejected() {
        let text = "\
tosca_version: indigo_subset_1
nodes:
  A:
    kind: Compute
    resources: { cpus: 1, mem_mb: 1, disk_gb: 1 }
    depends_on: [B]
  B:
    kind: Compute
    resources: { cpus: 1, mem_mb: 1, disk_gb: 1 }
    depends_on: [A]
";
        assert!(matches!(parse_template(text), Err(TemplateError::Cycle(_))));
    }

    #[test]
    fn structural_errors() {
        let unknown = MINIMAL.replace("kind: Compute", "kind: Router");
        assert!(matches!(parse_template(&unknown), Err(TemplateError::UnknownKind { .. })));

        let no_res = "tosca_version: indigo_subset_1\nnodes:\n  vm:\n    kind: Compute\n";
        assert_eq!(
            parse_template(no_res),
            Err(TemplateError::MissingProperty { node: "vm".into(), property: "resources".into() })
        );

        let dup = format!("{MINIMAL}  vm:\n    kind: Compute\n    resources: {{ cpus: 1, mem_mb: 1, disk_gb: 1 }}\n");
        assert_eq!(parse_template(&dup), Err(TemplateError::DuplicateNode("vm".into())));

        let no_image = "tosca_version: indigo_subset_1\nnodes:\n  s:\n    kind: Service\n";
        assert!(matches!(parse_template(no_image), Err(TemplateError::MissingProperty { .. })));

        let extra_top = format!("{MINIMAL}imports: [x]\n");
        assert!(matches!(parse_template(&extra_top), Err(TemplateError::Syntax { .. })));

        let bad_line = format!("{MINIMAL}outputs:\n  x: [vm\n");
        assert!(matches!(parse_template(&bad_line), Err(TemplateError::Syntax { line: 7, .. })));

        let workers_on_compute = format!("{MINIMAL}    min_workers: 1\n");
        assert!(matches!(parse_template(&workers_on_compute), Err(TemplateError::UnexpectedProperty { .. })));
    }

    #[test]
    fn validation_violations() {
        let text = format!("{MINIMAL}outputs:\n  url: ghost\n");
        let t = parse_template(&text).unwrap();
        assert_eq!(
            validate(&t).violations,
            vec![Violation::DanglingOutput { output: "url".into(), target: "ghost".into() }]
        );

        let t = parse_template(&format!("{MINIMAL}    bid: 0.5\n")).unwrap();
        assert_eq!(validate(&t).violations, vec![Violation::BidWithoutPreemptible { node: "vm".into() }]);

        let mut c = NodeSpec::new("c", NodeKind::ElasticCluster);
        c.resources = Some(ResourceVector::new(1, 1, 1));
        c.min_workers = Some(3);
        c.max_workers = Some(2);
        let t = template(vec![c]);
        assert_eq!(validate(&t).violations, vec![Violation::MinExceedsMax { node: "c".into(), min: 3, max: 2 }]);

        let t = template(vec![
            compute("a", ResourceVector::new(1, 1, 1), &["b"]),
            compute("b", ResourceVector::new(1, 1, 1), &["a", "zz"]),
        ]);
        let v = validate(&t).violations;
        assert!(v.contains(&Violation::DanglingDependency { node: "b".into(), target: "zz".into() }));
        assert!(v.iter().any(|x| matches!(x, Violation::Cycle { .. })));
    }

    #[test]
    fn demand_sums_compute_and_full_clusters() {
        assert_eq!(aggregate_demand(&template(vec![])), ResourceVector::ZERO);

        let t = template(vec![
            compute("a", ResourceVector::new(1, 1024, 10), &[]),
            compute("b", ResourceVector::new(2, 2048, 20), &[]),
        ]);
        // independent loop over components
        let mut expected = [0u64; 3];
        for r in [ResourceVector::new(1, 1024, 10), ResourceVector::new(2, 2048, 20)] {
            for (e, c) in expected.iter_mut().zip(r.components()) {
                *e += c;
            }
        }
        assert_eq!(aggregate_demand(&t).components(), expected);
        assert_eq!(expected, [3, 3072, 30]);

        let mut c = NodeSpec::new("wn", NodeKind::ElasticCluster);
        c.resources = Some(ResourceVector::new(1, 512, 5));
        c.min_workers = Some(1);
        c.max_workers = Some(4);
        let mut s = NodeSpec::new("svc", NodeKind::Service);
        s.image = Some("img".into());
        assert_eq!(aggregate_demand(&template(vec![c, s])), ResourceVector::new(4, 2048, 20));
    }

    #[test]
    fn topological_order_examples() {
        let r = ResourceVector::new(1, 1, 1);
        assert_eq!(topological_order(&template(vec![compute("x", r, &[])])).unwrap(), vec!["x"]);
        assert_eq!(
            topological_order(&template(vec![compute("A", r, &["B"]), compute("B", r, &[])])).unwrap(),
            vec!["B", "A"]
        );
        let diamond = template(vec![
            compute("A", r, &["B", "C"]),
            compute("B", r, &["D"]),
            compute("C", r, &["D"]),
            compute("D", r, &[]),
        ]);
        assert_eq!(topological_order(&diamond).unwrap(), vec!["D", "B", "C", "A"]);

        let cyclic = template(vec![compute("A", r, &["B"]), compute("B", r, &["A"])]);
        assert!(matches!(topological_order(&cyclic), Err(TemplateError::Cycle(_))));
    }

    #[test]
    fn diamond_order_matches_brute_force_enumeration() {
        let r = ResourceVector::new(1, 1, 1);
        let diamond = template(vec![
            compute("A", r, &["B", "C"]),
            compute("B", r, &["D"]),
            compute("C", r, &["D"]),
            compute("D", r, &[]),
        ]);
        let names = ["A", "B", "C", "D"];
        let mut valid = Vec::new();
        // all 24 permutations
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = [a, b, c, d];
                        if (0..4).all(|i| p.contains(&i)) {
                            let order: Vec<&str> = p.iter().map(|&i| names[i]).collect();
                            let pos = |n: &str| order.iter().position(|x| *x == n).unwrap();
                            let ok = diamond.nodes.values().all(|n| n.depends_on.iter().all(|d| pos(d) < pos(&n.name)));
                            if ok {
                                valid.push(order);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(valid.len(), 2);
        let smallest = valid.iter().min().unwrap();
        assert_eq!(topological_order(&diamond).unwrap(), *smallest);
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "\
tosca_version: indigo_subset_1
nodes:
  wn:
    kind: ElasticCluster
    resources: { cpus: 1, mem_mb: 512, disk_gb: 5 }
    preemptible: true
    bid: 0.25
    depends_on: [fe]
    min_workers: 1
    max_workers: 4
  fe:
    kind: Compute
    resources: { cpus: 2, mem_mb: 4096, disk_gb: 100 }
    image: \"ubuntu, lts\"
  job:
    kind: Job
    image: worker:1
    depends_on: [wn]
    input_datasets: [ds1, ds2]
outputs:
  url: fe
";
        let t = parse_template(text).unwrap();
        assert_eq!(parse_template(&t.to_text()).unwrap(), t);
        assert_eq!(t.required_datasets().len(), 2);
    }
}
