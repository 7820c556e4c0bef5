//! Predicate subscriptions, the delivery log, the pull feed and webhook
//! pushes.

use std::sync::mpsc;
use std::time::Duration;

use ienv_core::access::{Action, Resource, ResourceKind};
use ienv_core::events::{attribute_type, Event};
use ienv_core::predicate::Predicate;
use ienv_core::{DatasetId, PrincipalId, ProjectId, SubId, Timestamp};
use serde::{Deserialize, Serialize};

use crate::auth;
use crate::error::{Error, Result};
use crate::platform::{Platform, Tx};
use crate::state::State;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Channel {
    Feed,
    Webhook { url: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: SubId,
    pub principal_id: PrincipalId,
    pub predicate: Predicate,
    /// The predicate as submitted.
    pub predicate_text: String,
    pub channel: Channel,
    pub created_at: Timestamp,
    pub active: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Delivered,
    /// Webhook push not yet acknowledged.
    Pending,
    Failed,
    /// Matched, but the subscriber may not read the referenced data.
    Suppressed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub delivery_id: u64,
    pub event_id: u64,
    pub sub_id: SubId,
    pub principal_id: PrincipalId,
    pub status: DeliveryStatus,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishOutcome {
    pub event_id: u64,
    pub delivered: usize,
    pub suppressed: usize,
}

/// One feed entry per event, listing every subscription of the principal
/// it matched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedEntry {
    pub event: Event,
    pub subscription_ids: Vec<SubId>,
}

#[derive(Clone, Debug)]
pub(crate) struct WebhookTask {
    pub delivery_id: u64,
    pub url: String,
    pub body: serde_json::Value,
}

/// Whether `principal` may see an event: read on the referenced dataset,
/// else on the referenced project. Events naming neither are visible.
fn may_see(st: &State, cfg: &crate::config::Config, principal: &PrincipalId, event: &Event) -> bool {
    if let Some(ds) = event.attr_str("dataset_id") {
        if st.datasets.contains_key(&DatasetId::from(ds)) {
            let r = Resource::new(ResourceKind::Dataset, ds);
            return auth::check_in(st, cfg, principal, Action::Read, &r).allowed;
        }
    }
    if let Some(p) = event.attr_str("project_id") {
        if st.projects.contains_key(&ProjectId::from(p)) {
            let r = Resource::new(ResourceKind::Project, p);
            return auth::check_in(st, cfg, principal, Action::Read, &r).allowed;
        }
    }
    true
}

/// Appends `event` and writes exactly one delivery per matching active
/// subscription.
pub(crate) fn deliver(tx: &mut Tx<'_>, event: Event) -> PublishOutcome {
    let attrs = event.match_attrs();
    let mut outcome = PublishOutcome { event_id: event.event_id, ..Default::default() };
    let matched: Vec<Subscription> =
        tx.st.subscriptions.values().filter(|s| s.active && s.predicate.eval(&attrs)).cloned().collect();
    for sub in matched {
        let visible = may_see(tx.st, tx.cfg, &sub.principal_id, &event);
        let delivery_id = tx.st.deliveries.len() as u64 + 1;
        let status = match (&sub.channel, visible) {
            (_, false) => DeliveryStatus::Suppressed,
            (Channel::Feed, true) => DeliveryStatus::Delivered,
            (Channel::Webhook { url }, true) => {
                tx.webhooks.push(WebhookTask {
                    delivery_id,
                    url: url.clone(),
                    body: serde_json::json!({ "event": &event, "subscription_id": &sub.sub_id }),
                });
                DeliveryStatus::Pending
            }
        };
        if visible {
            outcome.delivered += 1;
        } else {
            outcome.suppressed += 1;
        }
        tx.st.deliveries.push(Delivery {
            delivery_id,
            event_id: event.event_id,
            sub_id: sub.sub_id.clone(),
            principal_id: sub.principal_id.clone(),
            status,
            attempts: 0,
            last_error: None,
        });
    }
    tx.st.events.push(event);
    outcome
}

/// Queues a push on the webhook worker, starting it on first use.
pub(crate) fn dispatch_webhook(platform: &Platform, task: WebhookTask) {
    let mut slot = platform.inner.webhooks.lock().unwrap_or_else(|e| e.into_inner());
    let sender = slot.get_or_insert_with(|| {
        let (tx, rx) = mpsc::channel::<WebhookTask>();
        let weak = std::sync::Arc::downgrade(&platform.inner);
        std::thread::Builder::new()
            .name("ienv-webhooks".into())
            .spawn(move || {
                for task in rx {
                    let Some(inner) = weak.upgrade() else { break };
                    let platform = Platform { inner };
                    push(&platform, task);
                }
            })
            .expect("spawn webhook worker");
        tx
    });
    if let Err(mpsc::SendError(task)) = sender.send(task) {
        log::warn!("webhook worker gone; delivery {} left pending", task.delivery_id);
    }
}

/// POSTs with up to `webhook_retries` retries, doubling the delay each
/// time; success is any 2xx.
fn push(platform: &Platform, task: WebhookTask) {
    let cfg = &platform.config().notify;
    let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(10)).build();
    let mut delay = cfg.webhook_backoff_ms;
    let mut attempts = 0;
    let mut last_error = None;
    let ok = loop {
        attempts += 1;
        match agent.post(&task.url).send_json(&task.body) {
            Ok(resp) if (200..300).contains(&resp.status()) => break true,
            Ok(resp) => last_error = Some(format!("status {}", resp.status())),
            Err(ureq::Error::Status(code, _)) => last_error = Some(format!("status {code}")),
            Err(e) => last_error = Some(e.to_string()),
        }
        if attempts > cfg.webhook_retries {
            break false;
        }
        std::thread::sleep(Duration::from_millis(delay));
        delay = delay.saturating_mul(2);
    };
    let result = platform.transact(|tx| {
        if let Some(d) = tx.st.deliveries.get_mut(task.delivery_id as usize - 1) {
            d.attempts = attempts;
            d.status = if ok { DeliveryStatus::Delivered } else { DeliveryStatus::Failed };
            d.last_error = if ok { None } else { last_error.clone() };
        }
        Ok(())
    });
    if let Err(e) = result {
        log::error!("delivery {} status not recorded: {e}", task.delivery_id);
    }
    if !ok {
        log::warn!("webhook {} failed after {attempts} attempts", task.url);
    }
}

impl Platform {
    /// Registers a predicate subscription. Matching starts with the next
    /// published event.
    pub fn subscribe(&self, principal: &PrincipalId, predicate_text: &str, channel: Channel) -> Result<SubId> {
        let predicate = Predicate::parse(predicate_text)?;
        predicate.type_check(attribute_type)?;
        if let Channel::Webhook { url } = &channel {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(Error::InvalidInput(format!("webhook url `{url}` must be http or https")));
            }
        }
        self.transact(|tx| {
            if principal.is_anonymous() || !tx.st.principals.contains_key(principal) {
                return Err(Error::Unauthenticated);
            }
            let id = SubId::new(tx.next_id("sub"));
            tx.st.subscriptions.insert(
                id.clone(),
                Subscription {
                    sub_id: id.clone(),
                    principal_id: principal.clone(),
                    predicate,
                    predicate_text: predicate_text.into(),
                    channel,
                    created_at: tx.now,
                    active: true,
                },
            );
            Ok(id)
        })
    }

    pub fn subscriptions(&self, principal: &PrincipalId) -> Vec<Subscription> {
        self.read().subscriptions.values().filter(|s| &s.principal_id == principal).cloned().collect()
    }

    /// Stops matching; past deliveries stay in the log.
    pub fn deactivate_subscription(&self, id: &SubId, actor: &PrincipalId) -> Result<()> {
        self.transact(|tx| {
            let sub = tx.st.subscriptions.get_mut(id).ok_or_else(|| Error::UnknownSubscription(id.to_string()))?;
            if &sub.principal_id != actor {
                return Err(Error::denied("only the owner may change a subscription"));
            }
            sub.active = false;
            Ok(())
        })
    }

    /// Feed-channel deliveries for `principal` with event id above `since`,
    /// ascending, grouped by event.
    pub fn feed(&self, principal: &PrincipalId, since: u64, limit: usize) -> Vec<FeedEntry> {
        let st = self.read();
        let mut out: Vec<FeedEntry> = Vec::new();
        for d in st
            .deliveries
            .iter()
            .filter(|d| &d.principal_id == principal && d.event_id > since && d.status == DeliveryStatus::Delivered)
        {
            let is_feed = st.subscriptions.get(&d.sub_id).is_some_and(|s| s.channel == Channel::Feed);
            if !is_feed {
                continue;
            }
            match out.last_mut() {
                Some(last) if last.event.event_id == d.event_id => last.subscription_ids.push(d.sub_id.clone()),
                _ => {
                    if out.len() == limit {
                        break;
                    }
                    let event = st.events[d.event_id as usize - 1].clone();
                    out.push(FeedEntry { event, subscription_ids: vec![d.sub_id.clone()] });
                }
            }
        }
        out
    }

    /// The delivery log entries of one principal, every status included.
    pub fn deliveries(&self, principal: &PrincipalId) -> Vec<Delivery> {
        self.read().deliveries.iter().filter(|d| &d.principal_id == principal).cloned().collect()
    }

    /// Highest event id published so far.
    pub fn latest_event_id(&self) -> u64 {
        self.read().events.len() as u64
    }

    pub fn events_since(&self, since: u64) -> Vec<Event> {
        self.read().events.iter().skip(since as usize).cloned().collect()
    }
}
