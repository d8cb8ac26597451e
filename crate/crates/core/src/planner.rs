//! Analytic inserted-parameter ledgers for host backbones too large to
//! allocate at desk scale.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_components, InterMode};
use crate::error::{Error, Result};
use crate::model::{AdapterTemplate, ParamReport, ParamRow};
use crate::params::Role;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Host {
    /// Width 768, 12 blocks grouped into 4 logical stages of 3.
    VitB16,
    /// Widths 96/192/384/768, depths 2/2/6/2.
    SwinT,
    Custom {
        dims: Vec<usize>,
        depths: Vec<usize>,
    },
}

impl Host {
    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "vit_b16" => Ok(Host::VitB16),
            "swin_t" => Ok(Host::SwinT),
            _ => Err(Error::Config(format!(
                "unknown host {s:?} (custom hosts need dims and depths)"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Host::VitB16 => "vit-b16".into(),
            Host::SwinT => "swin-t".into(),
            Host::Custom { dims, depths } => format!("custom(dims={dims:?}, depths={depths:?})"),
        }
    }

    pub fn stages(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let (dims, depths) = match self {
            Host::VitB16 => (vec![768; 4], vec![3; 4]),
            Host::SwinT => (vec![96, 192, 384, 768], vec![2, 2, 6, 2]),
            Host::Custom { dims, depths } => (dims.clone(), depths.clone()),
        };
        if dims.is_empty() || dims.len() != depths.len() || dims.contains(&0) || depths.contains(&0) {
            return Err(Error::Config(format!(
                "host needs matching non-empty positive dims and depths, got {dims:?} / {depths:?}"
            )));
        }
        Ok((dims, depths))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentTotal {
    pub component: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanReport {
    pub host: String,
    pub template: AdapterTemplate,
    /// One row per inserted adapter.
    pub report: ParamReport,
    /// Sum of each adapter component over all adapters.
    pub components: Vec<ComponentTotal>,
    pub assumptions: Vec<String>,
}

impl PlanReport {
    pub fn component(&self, name: &str) -> usize {
        self.components
            .iter()
            .find(|c| c.component == name)
            .map_or(0, |c| c.count)
    }

    pub fn inserted(&self) -> usize {
        self.report.inserted
    }

    /// Aligned human-readable table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let t = &self.template;
        let _ = writeln!(
            s,
            "host {}  alpha {}  inter {}  fft_bias {}",
            self.host,
            t.alpha,
            t.inter_mode.as_str(),
            if t.fft_bias { "on" } else { "off" }
        );
        let w = self.report.rows.iter().map(|r| r.name.len()).max().unwrap_or(7).max(9);
        let _ = writeln!(s, "{:<w$}  {:>12}", "adapter", "params");
        for r in &self.report.rows {
            let _ = writeln!(s, "{:<w$}  {:>12}", r.name, r.count);
        }
        let _ = writeln!(s, "{:<w$}  {:>12}", "component", "params");
        for c in &self.components {
            let _ = writeln!(s, "{:<w$}  {:>12}", c.component, c.count);
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>12}  ({:.3}M)",
            "inserted",
            self.inserted(),
            self.inserted() as f64 / 1e6
        );
        for a in &self.assumptions {
            let _ = writeln!(s, "assumption: {a}");
        }
        s
    }
}

const COMPONENTS: [&str; 8] = ["down", "up", "conv3", "conv5", "fft", "mix", "align", "fuse"];

/// Inserted-parameter ledger for `host` with every block carrying one
/// adapter built from `template`. Pure arithmetic; nothing is allocated.
pub fn plan_params(host: &Host, template: &AdapterTemplate) -> Result<PlanReport> {
    let (dims, depths) = host.stages()?;
    let mut rows = Vec::new();
    let mut totals = [0usize; COMPONENTS.len()];
    for (s, cfgs) in template.layout(&dims, &depths).iter().enumerate() {
        for (b, cfg) in cfgs.iter().enumerate() {
            let parts = adapter_components(cfg)?;
            for (name, n) in &parts {
                let i = COMPONENTS.iter().position(|c| c == name).expect("known component");
                totals[i] += n;
            }
            rows.push(ParamRow {
                name: format!("stage{s}.block{b}.adapter"),
                role: Role::Adapter,
                count: parts.iter().map(|(_, n)| n).sum(),
                tuned: true,
            });
        }
    }
    let components = COMPONENTS
        .iter()
        .zip(totals)
        .filter(|(_, n)| *n > 0)
        .map(|(c, n)| ComponentTotal {
            component: (*c).to_string(),
            count: n,
        })
        .collect();
    let mut assumptions = vec![
        "one adapter after every Transformer block".to_string(),
        "every projection, depthwise kernel and pointwise conv carries a bias".to_string(),
        format!(
            "spectral branch: one complex weight per bottleneck channel{}",
            if template.fft_bias {
                " plus one complex bias"
            } else {
                ", no bias"
            }
        ),
        "first stage has no inter-stage alignment parameters".to_string(),
    ];
    if template.inter_mode != InterMode::None {
        assumptions.push("alignment is a pointwise projection C'_prev -> C' on each later stage's last adapter".into());
    }
    if template.inter_mode == InterMode::Concat {
        assumptions.push("concat fusion is followed by a pointwise fuse 2C' -> C'".into());
    }
    if *host == Host::VitB16 {
        assumptions.push("ViT blocks are grouped into 4 logical stages of 3".into());
    }
    Ok(PlanReport {
        host: host.name(),
        template: *template,
        report: ParamReport::from_rows(rows),
        components,
        assumptions,
    })
}
