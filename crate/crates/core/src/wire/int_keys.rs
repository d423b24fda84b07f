//! Integer-keyed maps as JSON objects with string keys.
//!
//! Plain serde already writes them that way, but reading them back fails
//! once the map sits inside an internally tagged enum (the content is
//! buffered and the keys stay strings), so decoding parses keys by hand.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<K, V, S>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error>
where
    K: Serialize,
    V: Serialize,
    S: Serializer,
{
    map.serialize(s)
}

pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
where
    K: FromStr + Ord,
    V: Deserialize<'de>,
    D: Deserializer<'de>,
{
    BTreeMap::<String, V>::deserialize(d)?
        .into_iter()
        .map(|(k, v)| {
            k.parse()
                .map(|k| (k, v))
                .map_err(|_| D::Error::custom(format!("bad integer key {k:?}")))
        })
        .collect()
}
