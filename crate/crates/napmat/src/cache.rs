//! Shared curve orders, built once per grid shape and kind.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use napmat_core::{build_order, CurveKind, CurveOrder, GridShape, Result};

#[derive(Debug, Default)]
pub struct OrderCache {
    orders: RwLock<HashMap<(GridShape, CurveKind), Arc<CurveOrder>>>,
}

impl OrderCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, shape: GridShape, kind: CurveKind) -> Result<Arc<CurveOrder>> {
        if let Some(order) = self.orders.read().unwrap_or_else(|e| e.into_inner()).get(&(shape, kind)) {
            return Ok(Arc::clone(order));
        }
        let built = Arc::new(build_order(shape, kind)?);
        let mut map = self.orders.write().unwrap_or_else(|e| e.into_inner());
        // another thread may have inserted while we were building
        Ok(Arc::clone(map.entry((shape, kind)).or_insert(built)))
    }

    pub fn len(&self) -> usize {
        self.orders.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Process-wide cache.
pub fn global() -> &'static OrderCache {
    static CACHE: OnceLock<OrderCache> = OnceLock::new();
    CACHE.get_or_init(OrderCache::new)
}
