//! Shared process state. Every mutation goes through the store's lock, so
//! commands are totally ordered and ticks never overlap.

use std::sync::{Arc, Mutex, MutexGuard};

use notigate_core::gateway::{Command, Gateway, Response, TickSummary};
use notigate_core::notifier::Transport;
use notigate_core::store::{Store, StoreError};
use notigate_core::time::{Clock, Timestamp};

use crate::config::ServiceConfig;

pub type SharedTransport = Box<dyn Transport + Send>;

pub struct App {
    store: Mutex<Store>,
    transport: Mutex<SharedTransport>,
    clock: Arc<dyn Clock>,
    token: Option<String>,
}

impl App {
    pub fn open(cfg: &ServiceConfig, clock: Arc<dyn Clock>, mut transport: SharedTransport) -> Result<Arc<Self>, StoreError> {
        let store = Store::open(cfg.store(), cfg.gateway.clone(), transport.as_mut())?;
        let r = store.recovery();
        tracing::info!(
            snapshot_seq = r.snapshot_seq,
            replayed = r.replayed,
            reexecuted = r.reexecuted,
            torn_tail = r.torn_tail,
            "store opened"
        );
        Ok(Arc::new(Self {
            store: Mutex::new(store),
            transport: Mutex::new(transport),
            clock,
            token: cfg.service.api_token.clone(),
        }))
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn lock(&self) -> MutexGuard<'_, Store> {
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn submit(&self, cmd: Command) -> Result<Response, StoreError> {
        let mut store = self.lock();
        let mut transport = self.transport.lock().unwrap_or_else(|p| p.into_inner());
        store.submit(cmd, transport.as_mut())
    }

    pub fn read<R>(&self, f: impl FnOnce(&Gateway) -> R) -> R {
        f(self.lock().gateway())
    }

    pub fn last_seq(&self) -> u64 {
        self.lock().last_seq()
    }

    /// Ticks only when something is due, so idle time leaves no log records.
    pub fn tick_if_due(&self) -> Result<Option<TickSummary>, StoreError> {
        let now = self.now();
        let mut store = self.lock();
        if !store.gateway().next_due().is_some_and(|d| d <= now) {
            return Ok(None);
        }
        let mut transport = self.transport.lock().unwrap_or_else(|p| p.into_inner());
        match store.submit(Command::Tick { now }, transport.as_mut())? {
            Response::Tick(s) => Ok(Some(s)),
            other => unreachable!("tick answered {other:?}"),
        }
    }

    pub fn snapshot(&self) -> Result<(), StoreError> {
        self.lock().snapshot()
    }
}
