//! Client/server entry protocol separating transaction work from persists.
//!
//! A client increments the access counter and only then checks the accepting
//! flag; the persister clears the flag and only then waits for the counter to
//! drain. With sequentially consistent operations on both, at least one side
//! observes the other, so no client is inside while a persist runs.

use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering::SeqCst};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerPhase {
    Accepting,
    Waiting,
    Persisting,
}

pub struct ServerState {
    accepting: AtomicBool,
    n_accessing: AtomicUsize,
    phase: AtomicU8,
    token: Mutex<()>,
}

impl Default for ServerState {
    fn default() -> Self {
        ServerState::new()
    }
}

impl ServerState {
    pub fn new() -> ServerState {
        ServerState {
            accepting: AtomicBool::new(true),
            n_accessing: AtomicUsize::new(0),
            phase: AtomicU8::new(0),
            token: Mutex::new(()),
        }
    }

    pub fn enter(&self) -> bool {
        self.n_accessing.fetch_add(1, SeqCst);
        if !self.accepting.load(SeqCst) {
            self.n_accessing.fetch_sub(1, SeqCst);
            return false;
        }
        true
    }

    pub fn leave(&self) {
        let before = self.n_accessing.fetch_sub(1, SeqCst);
        assert!(before > 0, "server_leave without a matching server_enter");
    }

    /// Runs `f` once no client is inside; concurrent calls are serialized.
    pub fn persist<T>(&self, f: impl FnOnce() -> T) -> T {
        let _token = self.token.lock().unwrap_or_else(|p| p.into_inner());
        self.accepting.store(false, SeqCst);
        self.phase.store(1, SeqCst);
        let mut spins = 0u32;
        while self.n_accessing.load(SeqCst) != 0 {
            spins += 1;
            if spins < 64 {
                std::hint::spin_loop();
            } else {
                std::thread::yield_now();
            }
        }
        self.phase.store(2, SeqCst);
        struct Reopen<'a>(&'a ServerState);
        impl Drop for Reopen<'_> {
            fn drop(&mut self) {
                self.0.phase.store(0, SeqCst);
                self.0.accepting.store(true, SeqCst);
            }
        }
        let _reopen = Reopen(self);
        f()
    }

    pub fn accessing(&self) -> usize {
        self.n_accessing.load(SeqCst)
    }

    pub fn phase(&self) -> ServerPhase {
        match self.phase.load(SeqCst) {
            0 => ServerPhase::Accepting,
            1 => ServerPhase::Waiting,
            _ => ServerPhase::Persisting,
        }
    }
}
