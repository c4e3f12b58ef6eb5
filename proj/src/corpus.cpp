#include <stdexcept>

#include "rac/hash.hpp"
#include "rac/pipeline.hpp"
#include "rac/rng.hpp"

namespace rac::pipeline {

namespace {

// Pool words are chosen to be disjoint from each other, from the stopword
// list, and from the question templates, so every content unit a gold
// question carries can be traced to a specific document.
const std::vector<std::string> kAdjectives = {
    "alpine",  "amber",    "ancient",  "arctic",  "brass",    "bronze",  "cedar",   "cobalt",
    "copper",  "coral",    "crimson",  "crystal", "desert",   "ebony",   "emerald", "frosted",
    "gilded",  "granite",  "hazel",    "indigo",  "ivory",    "jade",    "lunar",   "maple",
    "marble",  "midnight", "obsidian", "olive",   "onyx",     "opal",    "pearl",   "prairie",
    "ruby",    "rustic",   "sable",    "saffron", "scarlet",  "silver",  "topaz",   "velvet"};

const std::vector<std::string> kNouns = {
    "anchor",   "badger",  "beacon",  "bridge",     "canyon",  "compass", "condor",  "cricket",
    "dolphin",  "falcon",  "fern",    "garden",     "glacier", "harbor",  "heron",   "kestrel",
    "lagoon",   "lantern", "lighthouse", "marmot",  "meadow",  "mill",    "orchard", "osprey",
    "otter",    "pavilion", "pelican", "plateau",   "quarry",  "raven",   "reef",    "salmon",
    "sparrow",  "spire",   "terrace", "tower",      "trail",   "tundra",  "willow",  "wren"};

const std::vector<std::string> kFacetNames = {
    "history",      "pricing",    "maintenance", "design",  "safety",      "nutrition",
    "breeding",     "migration",  "construction", "navigation", "restoration", "photography",
    "folklore",     "climate",    "anatomy",     "training"};

// Detail vocabularies. Which facet name a set is paired with is decided per
// topic, never globally, so detail words carry no facet identity on their own.
const std::vector<std::vector<std::string>> kDetailSets = {
    {"origins", "founders", "archives", "dynasties", "relics", "chronicles"},
    {"tariffs", "discounts", "auctions", "invoices", "budgets", "appraisals"},
    {"lubrication", "inspections", "repairs", "polishing", "calibration", "upkeep"},
    {"blueprints", "sketches", "proportions", "contours", "palettes", "drafting"},
    {"helmets", "railings", "drills", "hazards", "signage", "harnesses"},
    {"proteins", "minerals", "vitamins", "forage", "rations", "digestion"},
    {"lineage", "pedigrees", "hatchlings", "incubation", "pairing", "genetics"},
    {"flyways", "wintering", "departures", "stopovers", "corridors", "arrivals"},
    {"scaffolding", "mortar", "beams", "foundations", "rivets", "masonry"},
    {"sextants", "bearings", "charts", "currents", "waypoints", "landmarks"},
    {"varnish", "retouching", "conservation", "patina", "refitting", "salvage"},
    {"lenses", "tripods", "exposures", "filters", "framing", "darkrooms"},
    {"legends", "ballads", "omens", "rituals", "fables", "proverbs"},
    {"rainfall", "humidity", "monsoons", "droughts", "frost", "breezes"},
    {"plumage", "talons", "vertebrae", "musculature", "gills", "antlers"},
    {"obedience", "agility", "whistles", "routines", "rewards", "commands"},
};

void shuffle(std::vector<size_t>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::string facet_doc_text(const std::string& adj, const std::string& noun,
                           const std::string& facet, const std::vector<std::string>& details,
                           int doc_idx, const std::string* next_facet) {
    size_t base = size_t(2 * doc_idx);
    auto d = [&](size_t i) { return details[(base + i) % details.size()]; };
    std::string topic = adj + " " + noun;
    std::string text = "the " + topic + " " + facet + " guide . " + facet + " of the " + topic +
                       " involves " + d(0) + " and " + d(1) + " . experts mention " + d(2) +
                       " and " + d(3) + " for the " + topic + " .";
    if (next_facet)
        text += " more about the " + facet + " and the " + *next_facet + " of the " + topic + " .";
    return text;
}

}  // namespace

const std::vector<std::string>& corpus_adjectives() { return kAdjectives; }
const std::vector<std::string>& corpus_nouns() { return kNouns; }

const std::vector<std::string>& corpus_facets() { return kFacetNames; }

const std::vector<std::vector<std::string>>& corpus_detail_sets() { return kDetailSets; }

CorpusBundle make_synthetic_corpus(const SyntheticCorpusSpec& spec) {
    size_t max_topics = kAdjectives.size() * kNouns.size();
    if (spec.num_topics <= 0)
        throw std::invalid_argument("corpus spec is degenerate: no topics");
    if (size_t(spec.num_topics) > max_topics)
        throw std::invalid_argument("corpus spec asks for more topics than adjective/noun pairs");
    size_t num_facets = kFacetNames.size();
    if (spec.facets_per_topic < 2)
        throw std::invalid_argument("every query must stay ambiguous: need >= 2 facets per topic");
    if (size_t(spec.facets_per_topic) > num_facets)
        throw std::invalid_argument("facets_per_topic exceeds the facet pool");
    if (spec.docs_per_facet <= 0)
        throw std::invalid_argument("docs_per_facet must be positive");

    // unique adjective+noun pair per topic
    std::vector<size_t> pair_order(max_topics);
    for (size_t i = 0; i < max_topics; ++i) pair_order[i] = i;
    Rng topic_rng(derive_seed(spec.seed, "topics"));
    shuffle(pair_order, topic_rng);

    uint64_t facet_seed = derive_seed(spec.seed, "facets");
    uint64_t detail_seed = derive_seed(spec.seed, "details");
    CorpusBundle bundle;
    for (int t = 0; t < spec.num_topics; ++t) {
        size_t pair = pair_order[size_t(t)];
        const std::string& adj = kAdjectives[pair / kNouns.size()];
        const std::string& noun = kNouns[pair % kNouns.size()];
        std::string topic_id = "t" + std::to_string(t);
        std::string topic = adj + " " + noun;

        auto pick = [](size_t n, Rng& rng, size_t keep) {
            std::vector<size_t> order(n);
            for (size_t i = 0; i < n; ++i) order[i] = i;
            shuffle(order, rng);
            order.resize(keep);
            return order;
        };
        Rng facet_rng(derive_seed(facet_seed, uint64_t(t)));
        std::vector<size_t> facet_order = pick(num_facets, facet_rng, size_t(spec.facets_per_topic));
        Rng detail_rng(derive_seed(detail_seed, uint64_t(t)));
        std::vector<size_t> detail_order =
            pick(kDetailSets.size(), detail_rng, size_t(spec.facets_per_topic));

        for (size_t fi = 0; fi < facet_order.size(); ++fi) {
            const std::string& facet = kFacetNames[facet_order[fi]];
            const std::vector<std::string>& details = kDetailSets[detail_order[fi]];
            bool has_next = fi + 1 < facet_order.size();
            std::string next = has_next ? kFacetNames[facet_order[fi + 1]] : std::string();
            for (int dj = 0; dj < spec.docs_per_facet; ++dj) {
                Document doc;
                doc.topic_id = topic_id;
                doc.doc_id = topic_id + "-" + facet + "-d" + std::to_string(dj);
                doc.text = facet_doc_text(adj, noun, facet, details, dj, has_next ? &next : nullptr);
                bundle.documents.push_back(std::move(doc));
            }
            if (has_next) {
                // Doc 0's opening sentence always carries details[0] and
                // details[1], so hint words taken from those slots are
                // guaranteed to sit next to the facet name in some passage.
                const std::vector<std::string>& next_details = kDetailSets[detail_order[fi + 1]];
                GoldRecord gold;
                gold.query_id = topic_id + "#" + std::to_string(fi);
                gold.topic_id = topic_id;
                gold.facet_a = facet;
                gold.facet_b = next;
                gold.detail_a = details[(size_t(t) + fi) % 2];
                gold.detail_b = next_details[(size_t(t) + fi + 1) % 2];
                gold.query = topic + " " + gold.detail_a + " " + gold.detail_b;
                gold.question = "are you looking for the " + gold.facet_a + " or the " +
                                gold.facet_b + " of the " + topic + " ?";
                bundle.gold.push_back(std::move(gold));
            }
        }
    }
    return bundle;
}

void save_corpus(const CorpusBundle& bundle, const std::string& docs_path,
                 const std::string& gold_path, const std::string& config_hash, uint64_t seed) {
    JsonlWriter docs(docs_path);
    docs.write(make_header(config_hash, seed));
    for (const Document& d : bundle.documents)
        docs.write(json{{"doc_id", d.doc_id}, {"topic_id", d.topic_id}, {"text", d.text}});

    JsonlWriter gold(gold_path);
    gold.write(make_header(config_hash, seed));
    for (const GoldRecord& g : bundle.gold)
        gold.write(json{{"query_id", g.query_id},
                        {"topic_id", g.topic_id},
                        {"query", g.query},
                        {"question", g.question},
                        {"facet_a", g.facet_a},
                        {"facet_b", g.facet_b},
                        {"detail_a", g.detail_a},
                        {"detail_b", g.detail_b}});
}

CorpusBundle load_corpus(const std::string& docs_path, const std::string& gold_path) {
    CorpusBundle bundle;
    for (const json& j : read_jsonl_records(docs_path)) {
        Document d;
        d.doc_id = j.at("doc_id").get<std::string>();
        d.topic_id = j.at("topic_id").get<std::string>();
        d.text = j.at("text").get<std::string>();
        bundle.documents.push_back(std::move(d));
    }
    for (const json& j : read_jsonl_records(gold_path)) {
        GoldRecord g;
        g.query_id = j.at("query_id").get<std::string>();
        g.topic_id = j.at("topic_id").get<std::string>();
        g.query = j.at("query").get<std::string>();
        g.question = j.at("question").get<std::string>();
        g.facet_a = j.at("facet_a").get<std::string>();
        g.facet_b = j.at("facet_b").get<std::string>();
        g.detail_a = j.at("detail_a").get<std::string>();
        g.detail_b = j.at("detail_b").get<std::string>();
        bundle.gold.push_back(std::move(g));
    }
    return bundle;
}

}  // namespace rac::pipeline
