use proptest::prelude::*;
use serde_json::{Map, Value};

use trialmesh::protocol::{ActorClass, ActorRef, MessageKind, RewardContribution, WireMessage};

pub fn actor_ref() -> impl Strategy<Value = ActorRef> {
    let name = "[a-zA-Z0-9 _\\-é]{0,12}";
    prop_oneof![
        (0i64..1_000, name).prop_map(|(i, n)| ActorRef {
            actor_index: i,
            actor_class: ActorClass::Agent,
            name: n,
        }),
        (0i64..1_000, name).prop_map(|(i, n)| ActorRef {
            actor_index: i,
            actor_class: ActorClass::Human,
            name: n,
        }),
        Just(ActorRef::environment()),
        Just(ActorRef::orchestrator()),
    ]
}

fn json_leaf() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        any::<f64>()
            .prop_filter("finite", |f| f.is_finite())
            .prop_map(Value::from),
        "\\PC{0,16}".prop_map(Value::String),
    ]
}

pub fn json_value() -> impl Strategy<Value = Value> {
    json_leaf().prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map("[a-z_]{1,8}", inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

pub fn body() -> impl Strategy<Value = Map<String, Value>> {
    prop::collection::btree_map("[a-z_]{1,10}", json_value(), 0..5).prop_map(|m| m.into_iter().collect())
}

pub fn wire_message() -> impl Strategy<Value = WireMessage> {
    (
        prop::sample::select(MessageKind::ALL.to_vec()),
        "[a-z0-9\\-]{1,16}",
        any::<bool>(),
        any::<u64>(),
        actor_ref(),
        body(),
    )
        .prop_map(|(kind, trial_id, drop_id, tick_id, sender, body)| WireMessage {
            trial_id: if drop_id && kind.trial_id_optional() {
                String::new()
            } else {
                trial_id
            },
            kind,
            tick_id,
            sender,
            body,
        })
}

/// Contributions for one (target, tick) with confidences in [0, 1].
pub fn contributions(target: i64, tick: u64) -> impl Strategy<Value = Vec<RewardContribution>> {
    let one = (-100.0f64..100.0, prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], actor_ref()).prop_map(
        move |(value, confidence, source)| RewardContribution {
            target_actor: target,
            value,
            confidence,
            source,
            tick_id: tick,
            latency_ticks: 0,
        },
    );
    prop::collection::vec(one, 0..8)
}
