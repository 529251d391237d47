use std::sync::{Arc, RwLock, Weak};

use ndarray::Array2;

use super::AttentionSite;
use crate::error::Result;

/// Everything an attention processor sees at one site invocation. `q`, `k`
/// and `v` are post-projection, before the head split.
pub struct AttentionCall<'a> {
    pub site: AttentionSite,
    pub timestep: usize,
    pub heads: usize,
    pub q: &'a Array2<f64>,
    pub k: &'a Array2<f64>,
    pub v: &'a Array2<f64>,
}

/// Replaces the attention computation at matched sites. Returns the
/// pre-output-projection result, shaped like `q` rows by `v` columns.
pub trait AttentionProcessor: Send + Sync {
    fn process(&self, call: &AttentionCall<'_>) -> Result<Array2<f64>>;
}

/// Predicate selecting attention sites.
#[derive(Clone)]
pub struct SiteFilter(Arc<dyn Fn(&AttentionSite) -> bool + Send + Sync>);

impl SiteFilter {
    pub fn new(f: impl Fn(&AttentionSite) -> bool + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn all() -> Self {
        Self::new(|_| true)
    }

    pub fn none() -> Self {
        Self::new(|_| false)
    }

    pub fn of_kind(block: super::BlockKind, kind: super::AttentionKind) -> Self {
        Self::new(move |s| s.block_kind == block && s.attention_kind == kind)
    }

    pub fn sites(sites: Vec<AttentionSite>) -> Self {
        Self::new(move |s| sites.iter().any(|t| t.same_slot(s)))
    }

    pub fn matches(&self, site: &AttentionSite) -> bool {
        (self.0)(site)
    }
}

struct Entry {
    id: u64,
    filter: SiteFilter,
    processor: Arc<dyn AttentionProcessor>,
}

#[derive(Default)]
struct Table {
    next_id: u64,
    entries: Vec<Entry>,
}

/// Installed processors for one backend. When several processors match a
/// site, the earliest installed one wins.
#[derive(Clone, Default)]
pub struct ProcessorRegistry {
    table: Arc<RwLock<Table>>,
}

impl ProcessorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(
        &self,
        inventory: &[AttentionSite],
        filter: SiteFilter,
        processor: Arc<dyn AttentionProcessor>,
    ) -> ProcessorHandle {
        let matched: Vec<AttentionSite> = inventory.iter().filter(|s| filter.matches(s)).copied().collect();
        if matched.is_empty() {
            log::warn!("attention processor installed but no site matches its filter");
        }
        let mut table = self.table.write().expect("processor table poisoned");
        let id = table.next_id;
        table.next_id += 1;
        table.entries.push(Entry {
            id,
            filter,
            processor,
        });
        ProcessorHandle {
            id,
            table: Arc::downgrade(&self.table),
            matched,
        }
    }

    pub fn lookup(&self, site: &AttentionSite) -> Option<Arc<dyn AttentionProcessor>> {
        let table = self.table.read().expect("processor table poisoned");
        table
            .entries
            .iter()
            .find(|e| e.filter.matches(site))
            .map(|e| e.processor.clone())
    }

    pub fn is_empty(&self) -> bool {
        self.table.read().expect("processor table poisoned").entries.is_empty()
    }
}

/// Uninstalls its processor when dropped.
pub struct ProcessorHandle {
    id: u64,
    table: Weak<RwLock<Table>>,
    matched: Vec<AttentionSite>,
}

impl ProcessorHandle {
    /// Sites the filter matched at install time.
    pub fn matched_sites(&self) -> &[AttentionSite] {
        &self.matched
    }

    /// True when the filter matched nothing; the install is then a no-op.
    pub fn is_empty(&self) -> bool {
        self.matched.is_empty()
    }

    pub fn release(self) {}
}

impl Drop for ProcessorHandle {
    fn drop(&mut self) {
        if let Some(table) = self.table.upgrade() {
            if let Ok(mut t) = table.write() {
                t.entries.retain(|e| e.id != self.id);
            }
        }
    }
}

/// Standard multi-head attention, as the backend computes it.
pub struct IdentityProcessor;

impl AttentionProcessor for IdentityProcessor {
    fn process(&self, call: &AttentionCall<'_>) -> Result<Array2<f64>> {
        crate::attention::kernels::multi_head_attention(call.q, call.k, call.v, call.heads)
    }
}
