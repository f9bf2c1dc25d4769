//! Cross-video claim consolidation: clustering, same-proposition checks,
//! canonical selection and citation union.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{cosine, BackendError, ChatRequest, Client};
use crate::error::{Error, Result};
use crate::generator::{video_of_claim_id, Claim};

pub const DEFAULT_TAU: f64 = 0.85;
const EMBED_BATCH: usize = 64;

const VERIFY_SYSTEM: &str = "You decide whether two statements assert the same proposition. \
They are the same only if every fact in one is also stated by the other: differing numbers, \
names, dates or places make them different. Answer with one word: yes or no.";

const MERGE_SYSTEM: &str = "You merge claims gathered from several videos about one event. \
Claims stating the same proposition become one merged claim that keeps the most specific wording. \
Every merged claim lists the ids of the input claims it covers and the videos that support it. \
Reply with JSON only: [{\"claim\": \"<text>\", \"citations\": [\"<video_id>\"], \
\"members\": [\"<claim_id>\"]}].";

const MERGE_SCHEMA: &str = "[{\"claim\": string, \"citations\": [string], \"members\": [string]}]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsolidationMode {
    #[default]
    EmbedSim,
    Llm,
}

impl std::str::FromStr for ConsolidationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "embed_sim" | "embed-sim" => Ok(Self::EmbedSim),
            "llm" => Ok(Self::Llm),
            _ => Err(format!("unknown consolidation mode '{s}' (expected embed_sim or llm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimCluster {
    /// Sorted by claim_id.
    pub members: Vec<Claim>,
    pub canonical: String,
    pub citations: BTreeSet<String>,
}

impl ClaimCluster {
    fn from_members(mut members: Vec<Claim>) -> Self {
        members.sort_by(|a, b| a.claim_id.cmp(&b.claim_id));
        let canonical = select_canonical(&members);
        let citations = members.iter().map(|c| c.video_id.clone()).collect();
        Self {
            members,
            canonical,
            citations,
        }
    }

    fn canonical_claim(&self) -> &Claim {
        self.members
            .iter()
            .find(|c| c.claim_id == self.canonical)
            .expect("canonical is a member")
    }

    pub fn to_consolidated(&self) -> ConsolidatedClaim {
        ConsolidatedClaim {
            text: self.canonical_claim().text.clone(),
            citations: self.citations.iter().cloned().collect(),
            member_ids: self.members.iter().map(|c| c.claim_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidatedClaim {
    #[serde(rename = "claim")]
    pub text: String,
    pub citations: Vec<String>,
    #[serde(rename = "members", default)]
    pub member_ids: Vec<String>,
}

impl ConsolidatedClaim {
    /// One claim per cited video carrying the merged text, so a consolidated
    /// list can be fed back through consolidation.
    pub fn to_claims(&self) -> Vec<Claim> {
        self.citations
            .iter()
            .map(|v| {
                let id = self
                    .member_ids
                    .iter()
                    .filter(|m| video_of_claim_id(m) == v)
                    .min()
                    .cloned()
                    .unwrap_or_else(|| format!("{v}#merged"));
                Claim {
                    claim_id: id,
                    video_id: v.clone(),
                    text: self.text.clone(),
                    evidence_frames: Vec::new(),
                }
            })
            .collect()
    }
}

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

/// Number of tokens containing a digit plus the number of capitalized runs,
/// not counting a run that is only the sentence-initial word.
pub fn information_score(text: &str) -> usize {
    let toks: Vec<&str> = text
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .collect();
    let numeric = toks.iter().filter(|t| t.chars().any(|c| c.is_ascii_digit())).count();
    let mut spans = 0;
    let mut i = 0;
    while i < toks.len() {
        if is_capitalized(toks[i]) && !toks[i].chars().any(|c| c.is_ascii_digit()) {
            let start = i;
            while i < toks.len() && is_capitalized(toks[i]) {
                i += 1;
            }
            if !(start == 0 && i - start == 1) {
                spans += 1;
            }
        } else {
            i += 1;
        }
    }
    numeric + spans
}

/// Highest information score; ties go to the longer text, then the smaller id.
pub fn select_canonical(members: &[Claim]) -> String {
    members
        .iter()
        .max_by(|a, b| {
            information_score(&a.text)
                .cmp(&information_score(&b.text))
                .then(a.text.chars().count().cmp(&b.text.chars().count()))
                .then(b.claim_id.cmp(&a.claim_id))
        })
        .map(|c| c.claim_id.clone())
        .expect("select_canonical needs at least one member")
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut x = x;
        while self.0[x] != r {
            let next = self.0[x];
            self.0[x] = r;
            x = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Single-link components over the graph with an edge wherever cosine ≥ tau.
/// Clusters come back ordered by their first member id.
pub fn cluster_claims(claims: &[Claim], embeddings: &[Vec<f32>], tau: f64) -> Result<Vec<ClaimCluster>> {
    if claims.len() != embeddings.len() {
        return Err(Error::Argument(format!(
            "{} claims but {} embeddings",
            claims.len(),
            embeddings.len()
        )));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Argument(format!("tau must be in (0, 1], got {tau}")));
    }
    let mut order: Vec<usize> = (0..claims.len()).collect();
    order.sort_by(|&a, &b| claims[a].claim_id.cmp(&claims[b].claim_id));
    let n = order.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if cosine(&embeddings[order[i]], &embeddings[order[j]]) >= tau {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<Claim>> = BTreeMap::new();
    for i in 0..n {
        let root = uf.find(i);
        groups.entry(root).or_default().push(claims[order[i]].clone());
    }
    let mut clusters: Vec<ClaimCluster> = groups.into_values().map(ClaimCluster::from_members).collect();
    clusters.sort_by(|a, b| a.members[0].claim_id.cmp(&b.members[0].claim_id));
    Ok(clusters)
}

/// Asks whether two claims state the same proposition. Anything other than a
/// clear yes counts as no.
pub fn same_proposition(client: &Client, canonical: &str, other: &str) -> std::result::Result<bool, BackendError> {
    let req = ChatRequest::new(
        VERIFY_SYSTEM,
        format!("SAME PROPOSITION\nStatement A: {canonical}\nStatement B: {other}\nSame proposition? yes or no."),
    );
    let reply = client.chat(&req)?;
    Ok(parse_yes(&reply))
}

fn parse_yes(reply: &str) -> bool {
    if let Ok(v) = crate::backend::extract_first_json(reply) {
        for key in ["same", "answer", "verdict"] {
            match &v[key] {
                Value::Bool(b) => return *b,
                Value::String(s) => return s.trim().eq_ignore_ascii_case("yes"),
                _ => {}
            }
        }
    }
    let word: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect();
    word.eq_ignore_ascii_case("yes")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyStats {
    pub judgments: usize,
    pub rejections: usize,
    pub failures: usize,
}

impl VerifyStats {
    fn add(&mut self, o: &VerifyStats) {
        self.judgments += o.judgments;
        self.rejections += o.rejections;
        self.failures += o.failures;
    }
}

/// Checks every member against the canonical candidate. Accepted members stay;
/// rejected ones are re-clustered among themselves (still by `tau`) and
/// verified again, so a pair the canonical split off can still merge with
/// each other. Singletons pass through without a backend call.
pub fn verify_cluster(
    cluster: &ClaimCluster,
    embeddings: &HashMap<String, Vec<f32>>,
    tau: f64,
    client: &Client,
) -> Result<(Vec<ClaimCluster>, VerifyStats)> {
    let mut stats = VerifyStats::default();
    if cluster.members.len() < 2 {
        return Ok((vec![cluster.clone()], stats));
    }
    let canon = cluster.canonical_claim().clone();
    let others: Vec<&Claim> = cluster.members.iter().filter(|c| c.claim_id != canon.claim_id).collect();
    let verdicts: Vec<std::result::Result<bool, BackendError>> = others
        .par_iter()
        .map(|c| same_proposition(client, &canon.text, &c.text))
        .collect();
    let mut kept = vec![canon.clone()];
    let mut rejected = Vec::new();
    for (c, v) in others.into_iter().zip(verdicts) {
        stats.judgments += 1;
        match v {
            Ok(true) => kept.push(c.clone()),
            Ok(false) => {
                stats.rejections += 1;
                rejected.push(c.clone());
            }
            Err(e) => {
                tracing::warn!(canonical = %canon.claim_id, member = %c.claim_id, "verification failed, splitting: {e}");
                stats.failures += 1;
                stats.rejections += 1;
                rejected.push(c.clone());
            }
        }
    }
    kept.sort_by(|a, b| a.claim_id.cmp(&b.claim_id));
    let citations = kept.iter().map(|c| c.video_id.clone()).collect();
    let mut out = vec![ClaimCluster {
        members: kept,
        canonical: canon.claim_id.clone(),
        citations,
    }];
    if !rejected.is_empty() {
        let embs = rejected
            .iter()
            .map(|c| {
                embeddings
                    .get(&c.claim_id)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("no embedding for {}", c.claim_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        for sub in cluster_claims(&rejected, &embs, tau)? {
            let (verified, s) = verify_cluster(&sub, embeddings, tau, client)?;
            stats.add(&s);
            out.extend(verified);
        }
    }
    out.sort_by(|a, b| a.members[0].claim_id.cmp(&b.members[0].claim_id));
    Ok((out, stats))
}

pub struct ConsolidationBackends<'a> {
    pub chat: &'a Client,
    pub embed: &'a Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consolidation {
    pub claims: Vec<ConsolidatedClaim>,
    pub mode: ConsolidationMode,
    /// True when llm mode could not parse the merge and fell back.
    pub fell_back: bool,
    pub clusters_before_verification: usize,
    pub verify: VerifyStats,
    /// Claims the llm merge left out or referenced invalidly.
    pub repaired_orphans: usize,
}

fn check_ids(claims: &[Claim]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for c in claims {
        if !seen.insert(c.claim_id.as_str()) {
            return Err(Error::Argument(format!("duplicate claim_id {}", c.claim_id)));
        }
    }
    Ok(())
}

pub fn embed_claims(claims: &[Claim], client: &Client) -> Result<Vec<Vec<f32>>> {
    let texts: Vec<String> = claims.iter().map(|c| c.text.clone()).collect();
    let batches: Vec<std::result::Result<Vec<Vec<f32>>, BackendError>> =
        texts.par_chunks(EMBED_BATCH).map(|b| client.embed(b)).collect();
    let mut out = Vec::with_capacity(texts.len());
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

fn consolidate_embed_sim(claims: &[Claim], backends: &ConsolidationBackends<'_>, tau: f64) -> Result<Consolidation> {
    let embeddings = embed_claims(claims, backends.embed)?;
    let clusters = cluster_claims(claims, &embeddings, tau)?;
    let by_id: HashMap<String, Vec<f32>> = claims
        .iter()
        .map(|c| c.claim_id.clone())
        .zip(embeddings)
        .collect();
    let verified: Vec<Result<(Vec<ClaimCluster>, VerifyStats)>> = clusters
        .par_iter()
        .map(|c| verify_cluster(c, &by_id, tau, backends.chat))
        .collect();
    let mut stats = VerifyStats::default();
    let mut out = Vec::new();
    for v in verified {
        let (cs, s) = v?;
        stats.add(&s);
        out.extend(cs.iter().map(ClaimCluster::to_consolidated));
    }
    out.sort_by(|a, b| a.member_ids[0].cmp(&b.member_ids[0]));
    Ok(Consolidation {
        claims: out,
        mode: ConsolidationMode::EmbedSim,
        fell_back: false,
        clusters_before_verification: clusters.len(),
        verify: stats,
        repaired_orphans: 0,
    })
}

fn merge_prompt(claims: &[Claim]) -> ChatRequest {
    let listing = claims
        .iter()
        .map(|c| format!("[{}] (video {}) {}", c.claim_id, c.video_id, c.text))
        .collect::<Vec<_>>()
        .join("\n");
    ChatRequest::new(MERGE_SYSTEM, format!("MERGE CLAIMS\n{listing}"))
}

/// Makes an llm merge consistent with its input: members must be known ids
/// used once, citations must be known videos and cover every member's video,
/// and claims nobody covered come back as singletons.
pub fn repair_merge(value: &Value, claims: &[Claim]) -> (Vec<ConsolidatedClaim>, usize) {
    let by_id: BTreeMap<&str, &Claim> = claims.iter().map(|c| (c.claim_id.as_str(), c)).collect();
    let videos: BTreeSet<&str> = claims.iter().map(|c| c.video_id.as_str()).collect();
    let entries = match value {
        Value::Array(a) => a.clone(),
        Value::Object(o) => o.get("claims").and_then(Value::as_array).cloned().unwrap_or_default(),
        _ => Vec::new(),
    };
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::new();
    let mut invalid_refs = 0;
    for e in entries {
        let mut members: Vec<String> = Vec::new();
        for m in e["members"].as_array().into_iter().flatten() {
            match m.as_str() {
                Some(id) if by_id.contains_key(id) && !used.contains(id) => {
                    used.insert(id.to_string());
                    members.push(id.to_string());
                }
                _ => invalid_refs += 1,
            }
        }
        if members.is_empty() {
            continue;
        }
        members.sort();
        let mut citations: BTreeSet<String> = e["citations"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(Value::as_str)
            .filter(|v| videos.contains(v))
            .map(str::to_string)
            .collect();
        citations.extend(members.iter().map(|m| by_id[m.as_str()].video_id.clone()));
        let text = e["claim"].as_str().map(str::trim).unwrap_or_default();
        let text = if text.is_empty() {
            let ms: Vec<Claim> = members.iter().map(|m| by_id[m.as_str()].clone()).collect();
            let canon = select_canonical(&ms);
            by_id[canon.as_str()].text.clone()
        } else {
            text.to_string()
        };
        out.push(ConsolidatedClaim {
            text,
            citations: citations.into_iter().collect(),
            member_ids: members,
        });
    }
    let mut orphans = 0;
    for c in claims {
        if !used.contains(&c.claim_id) {
            orphans += 1;
            out.push(ConsolidatedClaim {
                text: c.text.clone(),
                citations: vec![c.video_id.clone()],
                member_ids: vec![c.claim_id.clone()],
            });
        }
    }
    out.sort_by(|a, b| a.member_ids[0].cmp(&b.member_ids[0]));
    (out, orphans + invalid_refs)
}

pub fn consolidate(
    claims: &[Claim],
    mode: ConsolidationMode,
    backends: &ConsolidationBackends<'_>,
    tau: f64,
) -> Result<Consolidation> {
    check_ids(claims)?;
    if claims.is_empty() {
        return Ok(Consolidation {
            claims: Vec::new(),
            mode,
            fell_back: false,
            clusters_before_verification: 0,
            verify: VerifyStats::default(),
            repaired_orphans: 0,
        });
    }
    match mode {
        ConsolidationMode::EmbedSim => consolidate_embed_sim(claims, backends, tau),
        ConsolidationMode::Llm => {
            let mut sorted = claims.to_vec();
            sorted.sort_by(|a, b| a.claim_id.cmp(&b.claim_id));
            match backends.chat.chat_structured(&merge_prompt(&sorted), MERGE_SCHEMA) {
                Ok(s) => {
                    let (out, repaired) = repair_merge(&s.value, &sorted);
                    Ok(Consolidation {
                        clusters_before_verification: out.len(),
                        claims: out,
                        mode,
                        fell_back: false,
                        verify: VerifyStats::default(),
                        repaired_orphans: repaired,
                    })
                }
                Err(BackendError::StructuredOutput { error, .. }) => {
                    tracing::warn!("llm merge unparseable ({error}); falling back to embed_sim");
                    let mut c = consolidate_embed_sim(claims, backends, tau)?;
                    c.fell_back = true;
                    Ok(c)
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockRule, MockRuleSet, Role};

    fn claim(id: &str, text: &str) -> Claim {
        Claim {
            claim_id: id.into(),
            video_id: video_of_claim_id(id).into(),
            text: text.into(),
            evidence_frames: vec![],
        }
    }

    fn chat(rules: &[(&str, &str)], default: &str) -> Client {
        Client::mock(
            Role::TextChat,
            MockRuleSet {
                rules: rules
                    .iter()
                    .map(|(m, r)| MockRule {
                        match_substring: m.to_string(),
                        response: r.to_string(),
                    })
                    .collect(),
                default: default.into(),
            },
        )
    }

    fn embedder() -> Client {
        Client::mock(Role::Embed, MockRuleSet::default())
    }

    #[test]
    fn identical_and_orthogonal() {
        let cs = [claim("a#000", "x"), claim("b#000", "x")];
        let out = cluster_claims(&cs, &[vec![1.0, 0.0], vec![1.0, 0.0]], 0.85).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].members.len(), 2);
        let out = cluster_claims(&cs, &[vec![1.0, 0.0], vec![0.0, 1.0]], 0.85).unwrap();
        assert_eq!(out.len(), 2);
    }

    fn unit(deg: f64) -> Vec<f32> {
        let r = deg.to_radians();
        vec![r.cos() as f32, r.sin() as f32]
    }

    #[test]
    fn chain_forms_one_component() {
        // b sits between a and c: cos(25°)≈0.906 to each, cos(50°)≈0.643 end to end.
        let cs = [claim("a#000", "a"), claim("b#000", "b"), claim("c#000", "c")];
        let embs = [unit(0.0), unit(25.0), unit(50.0)];
        assert!(cosine(&embs[0], &embs[2]) < 0.85);
        let out = cluster_claims(&cs, &embs, 0.85).unwrap();
        assert_eq!(out.len(), 1);
        let ids: Vec<_> = out[0].members.iter().map(|c| c.claim_id.as_str()).collect();
        assert_eq!(ids, ["a#000", "b#000", "c#000"]);
    }

    #[test]
    fn cluster_rejects_bad_input() {
        let cs = [claim("a#000", "a")];
        assert!(cluster_claims(&cs, &[], 0.85).is_err());
        assert!(cluster_claims(&cs, &[vec![1.0]], 0.0).is_err());
        assert!(cluster_claims(&cs, &[vec![1.0]], 1.5).is_err());
    }

    #[test]
    fn canonical_scoring() {
        assert_eq!(information_score("Many died."), 0);
        assert_eq!(information_score("12 people died in Derna."), 2);
        assert_eq!(information_score("The New York Times reported 3 deaths."), 2);
        let ms = [claim("v#000", "Many died."), claim("v#001", "12 people died in Derna.")];
        assert_eq!(select_canonical(&ms), "v#001");
        assert_eq!(select_canonical(&ms[..1]), "v#000");
        let tie = [claim("v#002", "abc"), claim("v#001", "xyz")];
        assert_eq!(select_canonical(&tie), "v#001");
    }

    fn one_cluster(cs: &[Claim]) -> (ClaimCluster, HashMap<String, Vec<f32>>) {
        let embs: HashMap<_, _> = cs.iter().map(|c| (c.claim_id.clone(), vec![1.0f32])).collect();
        (ClaimCluster::from_members(cs.to_vec()), embs)
    }

    #[test]
    fn verification_paraphrase_and_distinct() {
        let yes = chat(&[("SAME PROPOSITION", "yes")], "");
        let (c, e) = one_cluster(&[
            claim("v1#000", "12 dead in Derna flood."),
            claim("v2#000", "The Derna flood killed 12 people."),
        ]);
        let (out, stats) = verify_cluster(&c, &e, 0.85, &yes).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].citations.len(), 2);
        assert_eq!(stats.judgments, 1);

        let no = chat(&[("SAME PROPOSITION", "no")], "");
        let (c, e) = one_cluster(&[claim("v1#000", "12 dead."), claim("v2#000", "15 dead.")]);
        let (out, _) = verify_cluster(&c, &e, 0.85, &no).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn singleton_needs_no_calls() {
        let client = chat(&[], "yes");
        let (c, e) = one_cluster(&[claim("v1#000", "x")]);
        let (out, stats) = verify_cluster(&c, &e, 0.85, &client).unwrap();
        assert_eq!(out, vec![c]);
        assert_eq!(client.calls(), 0);
        assert_eq!(stats, VerifyStats::default());
    }

    struct Failing;

    impl crate::backend::Transport for Failing {
        fn chat(&self, _: &crate::backend::BackendProfile, _: &ChatRequest) -> std::result::Result<String, BackendError> {
            Err(BackendError::Remote {
                status: 400,
                body: "bad".into(),
            })
        }

        fn embed(&self, _: &crate::backend::BackendProfile, _: &[String]) -> std::result::Result<Vec<Vec<f32>>, BackendError> {
            unreachable!()
        }

        fn entail(
            &self,
            _: &crate::backend::BackendProfile,
            _: &[String],
            _: &str,
        ) -> std::result::Result<crate::backend::Entailment, BackendError> {
            unreachable!()
        }

        fn fingerprint(&self) -> String {
            "failing".into()
        }
    }

    #[test]
    fn backend_failure_splits() {
        let client = Client::new(crate::backend::BackendProfile::mock(Role::TextChat), std::sync::Arc::new(Failing));
        let (c, e) = one_cluster(&[claim("v1#000", "A."), claim("v2#000", "B.")]);
        let (out, stats) = verify_cluster(&c, &e, 0.85, &client).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(stats.failures, 1);
    }

    #[test]
    fn unclear_reply_splits() {
        let client = chat(&[], "");
        let (c, e) = one_cluster(&[claim("v1#000", "A."), claim("v2#000", "B.")]);
        let (out, stats) = verify_cluster(&c, &e, 0.85, &client).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(stats.failures, 0);
    }

    #[test]
    fn yes_parsing() {
        assert!(parse_yes("Yes."));
        assert!(parse_yes("  yes, same"));
        assert!(parse_yes(r#"{"same": true}"#));
        assert!(!parse_yes("yesterday"));
        assert!(!parse_yes("No"));
        assert!(!parse_yes(""));
    }

    #[test]
    fn embed_sim_unions_citations() {
        let yes = chat(&[("SAME PROPOSITION", "yes")], "");
        let emb = embedder();
        let b = ConsolidationBackends { chat: &yes, embed: &emb };
        let cs = [
            claim("v1#000", "12 dead in Derna flood."),
            claim("v2#000", "12 dead in Derna flood."),
            claim("v3#000", "Officials opened three shelters in Benghazi."),
        ];
        let out = consolidate(&cs, ConsolidationMode::EmbedSim, &b, DEFAULT_TAU).unwrap();
        assert_eq!(out.claims.len(), 2);
        assert_eq!(out.claims[0].citations, vec!["v1", "v2"]);
        assert_eq!(out.claims[1].citations, vec!["v3"]);
        let again_in: Vec<Claim> = out.claims.iter().flat_map(|c| c.to_claims()).collect();
        let again = consolidate(&again_in, ConsolidationMode::EmbedSim, &b, DEFAULT_TAU).unwrap();
        assert_eq!(again.claims, out.claims);
    }

    #[test]
    fn llm_mode_repairs_citations() {
        let reply = r#"[{"claim":"12 died in Derna.","citations":["v1","v9"],"members":["v1#000","v2#000","zz#1"]}]"#;
        let c = chat(&[("MERGE CLAIMS", reply)], "");
        let emb = embedder();
        let b = ConsolidationBackends { chat: &c, embed: &emb };
        let cs = [
            claim("v1#000", "12 dead in Derna."),
            claim("v2#000", "Derna flood killed 12."),
            claim("v3#000", "Shelters opened."),
        ];
        let out = consolidate(&cs, ConsolidationMode::Llm, &b, DEFAULT_TAU).unwrap();
        assert!(!out.fell_back);
        assert_eq!(out.claims.len(), 2);
        assert_eq!(out.claims[0].citations, vec!["v1", "v2"]);
        assert_eq!(out.claims[1].member_ids, vec!["v3#000"]);
        assert_eq!(out.repaired_orphans, 2);
    }

    #[test]
    fn llm_mode_falls_back() {
        let c = chat(&[("MERGE CLAIMS", "no json here")], "");
        let emb = embedder();
        let b = ConsolidationBackends { chat: &c, embed: &emb };
        let cs = [claim("v1#000", "A fact."), claim("v2#000", "Another unrelated statement.")];
        let out = consolidate(&cs, ConsolidationMode::Llm, &b, DEFAULT_TAU).unwrap();
        assert!(out.fell_back);
        assert_eq!(out.mode, ConsolidationMode::EmbedSim);
        assert_eq!(out.claims.len(), 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let c = chat(&[], "");
        let emb = embedder();
        let b = ConsolidationBackends { chat: &c, embed: &emb };
        let cs = [claim("v1#000", "A."), claim("v1#000", "B.")];
        assert!(consolidate(&cs, ConsolidationMode::EmbedSim, &b, DEFAULT_TAU).is_err());
    }
}
