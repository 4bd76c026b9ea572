use std::cell::{RefCell, RefMut};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll};

use rand_chacha::ChaCha8Rng;

use super::trace::TraceKind;
use super::SemId;
use crate::error::SimError;
use crate::ids::ExecContext;
use crate::mem::{AccessOutcome, TlbScope};

#[derive(Debug)]
pub(crate) enum Request {
    Access {
        vaddr: u64,
        kind: TraceKind,
        overlapped: bool,
        probe: bool,
    },
    FlushLine(u64),
    FlushTlb(TlbScope),
    Compute(u64),
    Acquire(SemId),
    Release(SemId),
}

#[derive(Debug)]
pub(crate) enum Response {
    Access(AccessOutcome),
    Done,
}

/// Exchange slot between one simulated thread and the kernel. A thread
/// posts at most one request per poll and then waits for its response.
#[derive(Debug, Default)]
pub(crate) struct Mailbox {
    pub request: Option<Request>,
    pub response: Option<Result<Response, SimError>>,
    pub now: u64,
}

struct Op<'a> {
    mailbox: &'a RefCell<Mailbox>,
    request: Option<Request>,
}

impl Future for Op<'_> {
    type Output = Result<Response, SimError>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        if let Some(request) = self.request.take() {
            let mut mb = self.mailbox.borrow_mut();
            debug_assert!(mb.request.is_none() && mb.response.is_none());
            mb.request = Some(request);
            return Poll::Pending;
        }
        match self.mailbox.borrow_mut().response.take() {
            Some(r) => Poll::Ready(r),
            None => Poll::Pending,
        }
    }
}

/// Handle a simulated thread uses to issue operations. Every operation is
/// one kernel step and suspends the thread until the kernel has executed it.
pub struct Cpu {
    ctx: ExecContext,
    mailbox: Rc<RefCell<Mailbox>>,
    rng: RefCell<ChaCha8Rng>,
}

impl Cpu {
    pub(crate) fn new(ctx: ExecContext, mailbox: Rc<RefCell<Mailbox>>, rng: ChaCha8Rng) -> Self {
        Cpu {
            ctx,
            mailbox,
            rng: RefCell::new(rng),
        }
    }

    pub fn ctx(&self) -> ExecContext {
        self.ctx
    }

    /// Clock value at which the next operation will issue.
    pub fn now(&self) -> u64 {
        self.mailbox.borrow().now
    }

    /// Per-thread deterministic random stream.
    pub fn rng(&self) -> RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    fn submit(&self, request: Request) -> Op<'_> {
        Op {
            mailbox: &self.mailbox,
            request: Some(request),
        }
    }

    async fn load(
        &self,
        vaddr: u64,
        kind: TraceKind,
        overlapped: bool,
        probe: bool,
    ) -> Result<AccessOutcome, SimError> {
        let request = Request::Access {
            vaddr,
            kind,
            overlapped,
            probe,
        };
        match self.submit(request).await? {
            Response::Access(outcome) => Ok(outcome),
            Response::Done => unreachable!("access answered without an outcome"),
        }
    }

    pub async fn access(&self, vaddr: u64) -> Result<AccessOutcome, SimError> {
        self.load(vaddr, TraceKind::Load, false, false).await
    }

    /// Plain load recorded under `kind` in the trace.
    pub async fn access_as(&self, vaddr: u64, kind: TraceKind) -> Result<AccessOutcome, SimError> {
        self.load(vaddr, kind, false, false).await
    }

    /// Training load; its clock charge is reduced by the overlap factor.
    pub async fn train_access(&self, vaddr: u64) -> Result<AccessOutcome, SimError> {
        self.load(vaddr, TraceKind::Train, true, false).await
    }

    /// Timed load that fails with `ProbeLineCached` if the line is resident.
    pub async fn probe(&self, vaddr: u64) -> Result<AccessOutcome, SimError> {
        self.load(vaddr, TraceKind::Probe, false, true).await
    }

    pub async fn flush_line(&self, vaddr: u64) -> Result<(), SimError> {
        self.submit(Request::FlushLine(vaddr)).await.map(drop)
    }

    pub async fn flush_tlb(&self, scope: TlbScope) -> Result<(), SimError> {
        self.submit(Request::FlushTlb(scope)).await.map(drop)
    }

    pub async fn compute(&self, cycles: u64) -> Result<(), SimError> {
        self.submit(Request::Compute(cycles)).await.map(drop)
    }

    pub async fn acquire(&self, sem: SemId) -> Result<(), SimError> {
        self.submit(Request::Acquire(sem)).await.map(drop)
    }

    pub async fn release(&self, sem: SemId) -> Result<(), SimError> {
        self.submit(Request::Release(sem)).await.map(drop)
    }
}
