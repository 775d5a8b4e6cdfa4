//! Background registration thread.

use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::JoinHandle;

use nalgebra::Vector3;

use super::{iterate_icp, IcpConfig, RegistrationResult, Weighting};
use crate::geometry::Pose;
use crate::twin::SpatialIndex;

/// Immutable snapshot handed to the worker.
#[derive(Clone, Debug)]
pub struct RegistrationRequest {
    /// Keyframe the snapshot belongs to.
    pub keyframe: usize,
    pub t: f64,
    pub source: Vec<Vector3<f64>>,
    pub init: Pose,
    pub center: Vector3<f64>,
    pub index: Arc<SpatialIndex>,
}

#[derive(Clone, Debug)]
pub struct RegistrationResponse {
    pub keyframe: usize,
    pub t: f64,
    pub result: RegistrationResult,
}

pub fn run_request(req: &RegistrationRequest, icp: &IcpConfig, weighting: &Weighting) -> RegistrationResponse {
    let mut result = iterate_icp(&req.source, &req.index, &req.init, &req.center, icp);
    if result.converged {
        match result.with_weight(weighting) {
            Ok(r) => result = r,
            Err(_) => result.converged = false,
        }
    }
    RegistrationResponse { keyframe: req.keyframe, t: req.t, result }
}

/// Runs registrations on a dedicated thread, in submission order.
pub struct RegistrationWorker {
    tx: Option<Sender<RegistrationRequest>>,
    rx: Receiver<RegistrationResponse>,
    handle: Option<JoinHandle<()>>,
}

impl RegistrationWorker {
    pub fn spawn(icp: IcpConfig, weighting: Weighting) -> Self {
        let (tx, req_rx) = channel::<RegistrationRequest>();
        let (resp_tx, rx) = channel();
        let handle = std::thread::spawn(move || {
            for req in req_rx {
                if resp_tx.send(run_request(&req, &icp, &weighting)).is_err() {
                    break;
                }
            }
        });
        Self { tx: Some(tx), rx, handle: Some(handle) }
    }

    pub fn submit(&self, req: RegistrationRequest) {
        if let Some(tx) = &self.tx {
            // A closed channel means the worker exited; the request is lost.
            let _ = tx.send(req);
        }
    }

    /// Responses that are ready now.
    pub fn poll(&self) -> Vec<RegistrationResponse> {
        let mut out = Vec::new();
        loop {
            match self.rx.try_recv() {
                Ok(r) => out.push(r),
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        out
    }

    /// Waits for every outstanding request and stops the thread.
    pub fn finish(mut self) -> Vec<RegistrationResponse> {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        self.rx.try_iter().collect()
    }
}

impl Drop for RegistrationWorker {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
