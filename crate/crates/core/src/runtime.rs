//! Runtime shim around a modeled application instance.
//!
//! The shim gets control at every timer tick and before every externalizing
//! operation. It lets the application proceed only while its lease view is
//! valid by its own trusted clock, renews ahead of expiry, blocks all
//! threads once the lease has lapsed, and terminates on rejection.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::counter::InstanceId;
use crate::lease::{LeaseId, LeaseRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum AppStatus {
    Starting,
    Running,
    Blocked,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum InterceptEvent {
    ExternalizingSyscall,
    Timer,
    EnclaveExitReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterceptResult {
    Proceed,
    Blocked,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaseResponse {
    Granted { expiry: u64 },
    Rejected,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShimConfig {
    /// Renew once the lease has at most this many ticks left.
    pub renew_margin: u64,
    /// Wait after an error reply before retrying.
    pub retry_after: u64,
    /// Give up on an unanswered request after this long and resend.
    pub request_timeout: u64,
}

impl Default for ShimConfig {
    fn default() -> Self {
        ShimConfig {
            renew_margin: 3,
            retry_after: 2,
            request_timeout: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Outbound {
    pub request_no: u64,
    pub request: LeaseRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct InFlight {
    request_no: u64,
    sent_tt: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AppInstance {
    pub app_id: u64,
    pub instance_id: InstanceId,
    pub lease_id: LeaseId,
    /// Expiry of the last grant this instance received.
    pub lease_expiry: Option<u64>,
    pub state_version: u64,
    pub status: AppStatus,
    pub config: ShimConfig,
    in_flight: Option<InFlight>,
    next_request_no: u64,
    retry_at: Option<u64>,
    /// Trusted reading that authorized the latest externalization.
    pub last_authorizing_read: Option<u64>,
}

impl AppInstance {
    /// Starts an instance; its first renewal goes out before any work.
    pub fn bootstrap(
        app_id: u64,
        lease_id: LeaseId,
        instance_id: InstanceId,
        tt: u64,
        config: ShimConfig,
    ) -> (AppInstance, Outbound) {
        let mut app = AppInstance {
            app_id,
            instance_id,
            lease_id,
            lease_expiry: None,
            state_version: 0,
            status: AppStatus::Starting,
            config,
            in_flight: None,
            next_request_no: 0,
            retry_at: None,
            last_authorizing_read: None,
        };
        let out = app.send(tt);
        (app, out)
    }

    fn send(&mut self, tt: u64) -> Outbound {
        let request_no = self.next_request_no;
        self.next_request_no += 1;
        self.in_flight = Some(InFlight {
            request_no,
            sent_tt: tt,
        });
        self.retry_at = None;
        Outbound {
            request_no,
            request: LeaseRequest {
                lease_id: self.lease_id,
                requester: self.instance_id,
                stamp: tt,
            },
        }
    }

    fn may_send(&self, tt: u64) -> bool {
        match self.in_flight {
            Some(f) => tt >= f.sent_tt + self.config.request_timeout,
            None => self.retry_at.is_none_or(|r| tt >= r),
        }
    }

    /// Lease view is valid at trusted reading `tt`.
    pub fn lease_valid(&self, tt: u64) -> bool {
        self.lease_expiry.is_some_and(|lt| lt > tt)
    }

    pub fn is_terminated(&self) -> bool {
        self.status == AppStatus::Terminated
    }

    pub fn renewal_in_flight(&self) -> bool {
        self.in_flight.is_some()
    }

    /// Gate for one intercepted event at trusted reading `tt`.
    pub fn intercept(&mut self, event: InterceptEvent, tt: u64) -> (InterceptResult, Option<Outbound>) {
        if self.status == AppStatus::Terminated {
            return (InterceptResult::Terminated, None);
        }
        if self.lease_valid(tt) {
            self.status = AppStatus::Running;
            let near_expiry = self.lease_expiry.is_some_and(|lt| lt - tt <= self.config.renew_margin);
            let out = (near_expiry && self.may_send(tt)).then(|| self.send(tt));
            if event == InterceptEvent::ExternalizingSyscall {
                self.state_version += 1;
                self.last_authorizing_read = Some(tt);
            }
            return (InterceptResult::Proceed, out);
        }
        if self.status != AppStatus::Starting {
            self.status = AppStatus::Blocked;
        }
        let out = self.may_send(tt).then(|| self.send(tt));
        (InterceptResult::Blocked, out)
    }

    /// Applies the server's answer to request `request_no`. Stale answers
    /// are ignored.
    pub fn on_response(&mut self, request_no: u64, response: LeaseResponse, tt: u64) {
        if self.status == AppStatus::Terminated {
            return;
        }
        match self.in_flight {
            Some(f) if f.request_no == request_no => {}
            _ => return,
        }
        self.in_flight = None;
        match response {
            LeaseResponse::Granted { expiry } => {
                self.lease_expiry = Some(self.lease_expiry.map_or(expiry, |e| e.max(expiry)));
                if self.lease_valid(tt) {
                    self.status = AppStatus::Running;
                }
            }
            LeaseResponse::Rejected => self.status = AppStatus::Terminated,
            LeaseResponse::Error => self.retry_at = Some(tt + self.config.retry_after),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LID: LeaseId = LeaseId(3);

    fn boot(tt: u64) -> (AppInstance, Outbound) {
        AppInstance::bootstrap(1, LID, InstanceId(0xa), tt, ShimConfig::default())
    }

    #[test]
    fn cold_start_runs_after_grant() {
        let (mut app, out) = boot(0);
        assert_eq!(app.status, AppStatus::Starting);
        assert_eq!(out.request.stamp, 0);
        assert_eq!(
            app.intercept(InterceptEvent::ExternalizingSyscall, 0).0,
            InterceptResult::Blocked
        );
        assert_eq!(app.state_version, 0);
        app.on_response(out.request_no, LeaseResponse::Granted { expiry: 5 }, 1);
        assert_eq!(app.status, AppStatus::Running);
        assert_eq!(
            app.intercept(InterceptEvent::ExternalizingSyscall, 1).0,
            InterceptResult::Proceed
        );
        assert_eq!(app.state_version, 1);
    }

    #[test]
    fn rejected_at_birth_terminates_without_externalizing() {
        let (mut app, out) = boot(0);
        app.on_response(out.request_no, LeaseResponse::Rejected, 1);
        assert_eq!(
            app.intercept(InterceptEvent::ExternalizingSyscall, 1).0,
            InterceptResult::Terminated
        );
        assert_eq!(app.state_version, 0);
    }

    #[test]
    fn valid_lease_fast_path_renews_only_near_expiry() {
        let (mut app, out) = boot(0);
        app.on_response(out.request_no, LeaseResponse::Granted { expiry: 10 }, 0);
        let (r, o) = app.intercept(InterceptEvent::Timer, 5);
        assert_eq!((r, o), (InterceptResult::Proceed, None));
        let (r, o) = app.intercept(InterceptEvent::Timer, 8);
        assert_eq!(r, InterceptResult::Proceed);
        assert_eq!(o.unwrap().request.stamp, 8);
        // One renewal in flight at a time.
        assert_eq!(app.intercept(InterceptEvent::Timer, 9).1, None);
    }

    #[test]
    fn expired_lease_blocks_until_extension() {
        let (mut app, out) = boot(0);
        app.on_response(out.request_no, LeaseResponse::Granted { expiry: 5 }, 0);
        let (r, o) = app.intercept(InterceptEvent::ExternalizingSyscall, 5);
        assert_eq!(r, InterceptResult::Blocked);
        let mut o = o.unwrap();
        assert_eq!(app.status, AppStatus::Blocked);
        for tt in 6..10 {
            let (r, resent) = app.intercept(InterceptEvent::ExternalizingSyscall, tt);
            assert_eq!(r, InterceptResult::Blocked);
            o = resent.unwrap_or(o);
        }
        assert_eq!(app.state_version, 0);
        app.on_response(o.request_no, LeaseResponse::Granted { expiry: 15 }, 10);
        assert_eq!(
            app.intercept(InterceptEvent::ExternalizingSyscall, 10).0,
            InterceptResult::Proceed
        );
    }

    #[test]
    fn unreachable_server_keeps_instance_blocked() {
        let (mut app, out) = boot(0);
        app.on_response(out.request_no, LeaseResponse::Granted { expiry: 5 }, 0);
        let mut sent = 0;
        for tt in 5..20 {
            let (r, o) = app.intercept(InterceptEvent::ExternalizingSyscall, tt);
            assert_eq!(r, InterceptResult::Blocked);
            sent += o.is_some() as u32;
        }
        assert_eq!(app.state_version, 0);
        assert!(sent >= 2, "timed-out renewals are resent");
    }

    #[test]
    fn error_reply_retries_after_backoff() {
        let (mut app, out) = boot(0);
        app.on_response(out.request_no, LeaseResponse::Error, 1);
        assert!(app.intercept(InterceptEvent::Timer, 2).1.is_none());
        assert!(app.intercept(InterceptEvent::Timer, 3).1.is_some());
    }

    #[test]
    fn stale_response_is_ignored() {
        let (mut app, out) = boot(0);
        app.on_response(out.request_no + 7, LeaseResponse::Rejected, 1);
        assert_eq!(app.status, AppStatus::Starting);
    }

    #[test]
    fn grant_never_shortens_view() {
        let (mut app, out) = boot(0);
        app.on_response(out.request_no, LeaseResponse::Granted { expiry: 10 }, 0);
        let (_, o) = app.intercept(InterceptEvent::Timer, 8);
        app.on_response(o.unwrap().request_no, LeaseResponse::Granted { expiry: 7 }, 8);
        assert_eq!(app.lease_expiry, Some(10));
    }
}
