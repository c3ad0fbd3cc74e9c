//! Main and priority messages in one queue: priority is served first, and
//! a message that is received but never deleted comes back after the
//! visibility timeout.

use std::sync::Arc;
use std::time::Duration;

use feedmix::clock::{Clock, ManualClock};
use feedmix::model::{ChannelKind, MessageClass, QueueMessage};
use feedmix::queue::{DualQueue, QueueConfig};

fn main() {
    let clock = Arc::new(ManualClock::new(chrono::Utc::now()));
    let queue = DualQueue::new(
        QueueConfig {
            visibility_timeout: Duration::from_secs(30),
            capacity: 100,
        },
        clock.clone(),
    );
    let now = clock.now();
    for i in 0..3 {
        queue.send(QueueMessage::new(format!("bulk-{i}"), ChannelKind::News, MessageClass::Main, now)).unwrap();
    }
    queue.send(QueueMessage::new("urgent", ChannelKind::Twitter, MessageClass::Priority, now)).unwrap();

    let batch = queue.receive(2, clock.now());
    for m in &batch {
        println!("received {} ({:?})", m.stream_id, m.priority);
    }
    queue.delete(&batch[0].message_id).unwrap();
    println!("after one delete: {:?}", queue.depths());

    clock.advance(Duration::from_secs(31));
    for m in queue.receive(10, clock.now()) {
        println!("received {} ({:?}, delivery {})", m.stream_id, m.priority, m.receive_count);
        queue.delete(&m.message_id).unwrap();
    }
    println!("{:?}", queue.stats());
}
