//! A subscribable tap on a pipeline edge.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use super::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JointId(pub u64);

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JointError {
    #[error("subscriber `{0}` is already subscribed")]
    AlreadySubscribed(String),
    #[error("unknown subscriber `{0}`")]
    UnknownSubscriber(String),
}

#[derive(Debug)]
pub struct Subscription<S, Q> {
    pub subscriber: S,
    pub queue: Q,
}

/// Routes every published frame to each current subscriber's own queue, so a
/// slow subscriber only ever delays itself.
#[derive(Debug)]
pub struct FeedJoint<S, Q> {
    id: JointId,
    feed: Option<String>,
    subs: Vec<Subscription<S, Q>>,
    published: u64,
}

impl<S: PartialEq + fmt::Debug, Q> FeedJoint<S, Q> {
    pub fn new(id: JointId, feed: Option<String>) -> Self {
        FeedJoint { id, feed, subs: Vec::new(), published: 0 }
    }

    pub fn id(&self) -> JointId {
        self.id
    }

    /// Feed whose records flow through this joint, if it carries one.
    pub fn feed(&self) -> Option<&str> {
        self.feed.as_deref()
    }

    pub fn published(&self) -> u64 {
        self.published
    }

    pub fn subscribe(&mut self, subscriber: S, queue: Q) -> Result<(), JointError> {
        if self.is_subscribed(&subscriber) {
            return Err(JointError::AlreadySubscribed(format!("{subscriber:?}")));
        }
        self.subs.push(Subscription { subscriber, queue });
        Ok(())
    }

    /// Removes the subscriber and hands back its pending queue.
    pub fn unsubscribe(&mut self, subscriber: &S) -> Result<Q, JointError> {
        let pos = self
            .subs
            .iter()
            .position(|s| &s.subscriber == subscriber)
            .ok_or_else(|| JointError::UnknownSubscriber(format!("{subscriber:?}")))?;
        Ok(self.subs.remove(pos).queue)
    }

    pub fn is_subscribed(&self, subscriber: &S) -> bool {
        self.subs.iter().any(|s| &s.subscriber == subscriber)
    }

    pub fn subscribers(&self) -> impl Iterator<Item = &S> {
        self.subs.iter().map(|s| &s.subscriber)
    }

    pub fn subscriber_count(&self) -> usize {
        self.subs.len()
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription<S, Q>> {
        self.subs.iter()
    }

    pub fn subscriptions_mut(&mut self) -> impl Iterator<Item = &mut Subscription<S, Q>> {
        self.subs.iter_mut()
    }

    pub fn subscription_mut(&mut self, subscriber: &S) -> Option<&mut Subscription<S, Q>> {
        self.subs.iter_mut().find(|s| &s.subscriber == subscriber)
    }

    /// Hands one copy of `frame` to every subscriber in subscription order.
    /// With no subscribers the frame is dropped. Returns the delivery count.
    pub fn publish(&mut self, frame: &Frame, mut deliver: impl FnMut(&S, &mut Q, Frame)) -> usize {
        self.published += 1;
        for s in &mut self.subs {
            deliver(&s.subscriber, &mut s.queue, frame.clone());
        }
        self.subs.len()
    }
}

/// Shared-frame variant: one stored copy per frame, released once the last
/// subscriber has consumed it.
impl<S: PartialEq + fmt::Debug> FeedJoint<S, VecDeque<Arc<Frame>>> {
    pub fn publish_shared(&mut self, frame: Frame) -> usize {
        self.published += 1;
        let shared = Arc::new(frame);
        for s in &mut self.subs {
            s.queue.push_back(Arc::clone(&shared));
        }
        self.subs.len()
    }

    pub fn consume(&mut self, subscriber: &S) -> Result<Option<Arc<Frame>>, JointError> {
        let sub = self
            .subscription_mut(subscriber)
            .ok_or_else(|| JointError::UnknownSubscriber(format!("{subscriber:?}")))?;
        Ok(sub.queue.pop_front())
    }

    /// Number of distinct frames still held for some subscriber.
    pub fn buffered_frames(&self) -> usize {
        let mut seen: Vec<*const Frame> = Vec::new();
        for s in &self.subs {
            for f in &s.queue {
                let p = Arc::as_ptr(f);
                if !seen.contains(&p) {
                    seen.push(p);
                }
            }
        }
        seen.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Shared = FeedJoint<&'static str, VecDeque<Arc<Frame>>>;

    fn frame(seq: u64) -> Frame {
        Frame::new(seq, 1024)
    }

    #[test]
    fn two_subscribers_release_after_second_consume() {
        let mut j: Shared = FeedJoint::new(JointId(1), Some("F".into()));
        j.subscribe("a", VecDeque::new()).unwrap();
        j.subscribe("b", VecDeque::new()).unwrap();
        assert_eq!(j.publish_shared(frame(1)), 2);
        assert_eq!(j.buffered_frames(), 1);
        assert_eq!(j.consume(&"a").unwrap().unwrap().seq(), 1);
        assert_eq!(j.buffered_frames(), 1);
        assert_eq!(j.consume(&"b").unwrap().unwrap().seq(), 1);
        assert_eq!(j.buffered_frames(), 0);
    }

    #[test]
    fn no_subscribers_drops_frame() {
        let mut j: Shared = FeedJoint::new(JointId(1), None);
        assert_eq!(j.publish_shared(frame(1)), 0);
        assert_eq!(j.buffered_frames(), 0);
    }

    #[test]
    fn slow_subscriber_does_not_hold_back_fast_one() {
        let mut j: Shared = FeedJoint::new(JointId(1), None);
        j.subscribe("fast", VecDeque::new()).unwrap();
        j.subscribe("slow", VecDeque::new()).unwrap();
        let mut fast_seen = Vec::new();
        for seq in 0..100 {
            j.publish_shared(frame(seq));
            fast_seen.push(j.consume(&"fast").unwrap().unwrap().seq());
        }
        assert_eq!(fast_seen, (0..100).collect::<Vec<_>>());
        assert_eq!(j.subscriptions().find(|s| s.subscriber == "slow").unwrap().queue.len(), 100);
    }

    #[test]
    fn mid_stream_subscription_and_set_semantics() {
        let mut j: Shared = FeedJoint::new(JointId(1), None);
        j.subscribe("a", VecDeque::new()).unwrap();
        j.publish_shared(frame(1));
        j.subscribe("b", VecDeque::new()).unwrap();
        j.publish_shared(frame(2));
        assert_eq!(j.consume(&"b").unwrap().unwrap().seq(), 2);
        assert!(j.consume(&"b").unwrap().is_none());
        assert!(matches!(j.subscribe("b", VecDeque::new()), Err(JointError::AlreadySubscribed(_))));
        j.unsubscribe(&"b").unwrap();
        assert!(matches!(j.unsubscribe(&"b"), Err(JointError::UnknownSubscriber(_))));
        j.subscribe("b", VecDeque::new()).unwrap();
        j.publish_shared(frame(3));
        assert_eq!(j.consume(&"b").unwrap().unwrap().seq(), 3);
        assert!(j.consume(&"b").unwrap().is_none());
        let a: Vec<u64> = std::iter::from_fn(|| j.consume(&"a").unwrap()).map(|f| f.seq()).collect();
        assert_eq!(a, vec![1, 2, 3]);
    }
}
