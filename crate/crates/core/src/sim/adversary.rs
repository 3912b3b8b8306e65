use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{ActorId, SimError, VirtualTime};

/// Matches messages by sender, receiver and message kind. `None` is a wildcard.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MessageSelector {
    #[serde(default)]
    pub from: Option<ActorId>,
    #[serde(default)]
    pub to: Option<ActorId>,
    #[serde(default)]
    pub kind: Option<String>,
}

impl MessageSelector {
    pub fn matches(&self, from: ActorId, to: ActorId, kind: &str) -> bool {
        self.from.is_none_or(|f| f == from)
            && self.to.is_none_or(|t| t == to)
            && self.kind.as_deref().is_none_or(|k| k == kind)
    }
}

/// What the adversary may do. Messages are authenticated, so tampering is
/// limited to delaying, dropping, replaying and rerouting them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryAction {
    /// Delay the next message matching `selector` by `ticks`.
    Delay {
        selector: MessageSelector,
        ticks: u64,
    },
    /// Drop the next message matching `selector`.
    Drop {
        selector: MessageSelector,
    },
    /// Re-deliver the most recent message matching `selector`.
    Replay {
        selector: MessageSelector,
    },
    /// Cut `actor` off the network until tick `until`.
    Isolate {
        actor: ActorId,
        until: u64,
    },
    /// Start another instance of a service (`app` names it in the world).
    CloneInstance {
        app: String,
    },
    Terminate {
        actor: ActorId,
    },
    SnapshotStorage {
        replica: u64,
    },
    RestoreStorage {
        replica: u64,
        snapshot: u64,
    },
    /// Deschedule `actor` for `ticks`; its events are deferred, not lost.
    Pause {
        actor: ActorId,
        ticks: u64,
    },
    /// Route messages sent by `from` to `to` instead of their destination.
    Redirect {
        from: ActorId,
        to: ActorId,
        until: u64,
    },
    /// Always rejected: counter devices cannot be decremented.
    DecrementCounter {
        device: ActorId,
    },
    /// Always rejected: the adversary holds no protocol keys.
    Forge {
        to: ActorId,
        kind: String,
    },
}

impl AdversaryAction {
    pub fn validate(&self) -> Result<(), SimError> {
        match self {
            AdversaryAction::DecrementCounter { device } => Err(SimError::ForbiddenAction(format!(
                "counter {device} cannot be decremented"
            ))),
            AdversaryAction::Forge { to, kind } => Err(SimError::ForbiddenAction(format!(
                "cannot forge authenticated `{kind}` message to {to}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            AdversaryAction::Delay { ticks, .. } => format!("delay({ticks})"),
            AdversaryAction::Drop { .. } => "drop".into(),
            AdversaryAction::Replay { .. } => "replay".into(),
            AdversaryAction::Isolate { actor, until } => format!("isolate({actor},{until})"),
            AdversaryAction::CloneInstance { app } => format!("clone_instance({app})"),
            AdversaryAction::Terminate { actor } => format!("terminate({actor})"),
            AdversaryAction::SnapshotStorage { replica } => format!("snapshot_storage({replica})"),
            AdversaryAction::RestoreStorage { replica, snapshot } => {
                format!("restore_storage({replica},{snapshot})")
            }
            AdversaryAction::Pause { actor, ticks } => format!("pause({actor},{ticks})"),
            AdversaryAction::Redirect { from, to, until } => {
                format!("redirect({from}->{to},{until})")
            }
            AdversaryAction::DecrementCounter { device } => format!("decrement_counter({device})"),
            AdversaryAction::Forge { to, kind } => format!("forge({kind}->{to})"),
        }
    }
}

/// Randomized network faults drawn from the engine's generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RandomFaults {
    pub delay_probability: f64,
    pub max_delay: u64,
    #[serde(default)]
    pub drop_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RuleEffect {
    Delay(u64),
    Drop,
}

#[derive(Debug, Default)]
pub(crate) struct AdversaryState {
    rules: Vec<(MessageSelector, RuleEffect)>,
    isolated: BTreeMap<ActorId, VirtualTime>,
    paused: BTreeMap<ActorId, VirtualTime>,
    redirects: BTreeMap<ActorId, (ActorId, VirtualTime)>,
}

impl AdversaryState {
    pub(crate) fn add_rule(&mut self, selector: MessageSelector, effect: RuleEffect) {
        self.rules.push((selector, effect));
    }

    /// Consumes the first rule matching the message, if any.
    pub(crate) fn take_rule(&mut self, from: ActorId, to: ActorId, kind: &str) -> Option<RuleEffect> {
        let idx = self.rules.iter().position(|(s, _)| s.matches(from, to, kind))?;
        Some(self.rules.remove(idx).1)
    }

    pub(crate) fn isolate(&mut self, actor: ActorId, until: VirtualTime) {
        let e = self.isolated.entry(actor).or_insert(until);
        *e = (*e).max(until);
    }

    pub(crate) fn is_isolated(&self, actor: ActorId, now: VirtualTime) -> bool {
        self.isolated_until(actor, now).is_some()
    }

    pub(crate) fn isolated_until(&self, actor: ActorId, now: VirtualTime) -> Option<VirtualTime> {
        self.isolated.get(&actor).copied().filter(|u| now < *u)
    }

    pub(crate) fn pause(&mut self, actor: ActorId, until: VirtualTime) {
        let e = self.paused.entry(actor).or_insert(until);
        *e = (*e).max(until);
    }

    pub(crate) fn paused_until(&self, actor: ActorId, now: VirtualTime) -> Option<VirtualTime> {
        self.paused.get(&actor).copied().filter(|u| now < *u)
    }

    pub(crate) fn redirect_until(&mut self, from: ActorId, to: ActorId, until: VirtualTime) {
        self.redirects.insert(from, (to, until));
    }

    pub(crate) fn redirect(&self, from: ActorId, to: ActorId, now: VirtualTime) -> ActorId {
        match self.redirects.get(&from) {
            Some((target, until)) if now < *until && to.kind == target.kind => *target,
            _ => to,
        }
    }
}
