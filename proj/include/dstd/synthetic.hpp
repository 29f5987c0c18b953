// Deterministic synthetic data: a template-grammar sentence corpus for
// masked-LM work and a small restaurant domain with scripted dialogs for
// state tracking. Values are always mentioned verbatim so that desk-scale
// models can actually learn the mapping.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dstd/data_io.hpp"
#include "dstd/dst.hpp"
#include "dstd/error.hpp"
#include "dstd/rng.hpp"

namespace dstd {

// ---------------------------------------------------------------------------
// Sentence corpus
// ---------------------------------------------------------------------------

namespace grammar {

inline const std::vector<std::string>& names() {
  static const std::vector<std::string> v = {
      "marigold",  "bluebell",  "harbor",    "lantern",   "juniper",  "saffron",  "willow",
      "coriander", "magnolia",  "ember",     "sundial",   "thistle",  "clover",   "fable",
      "meridian",  "larkspur",  "copperpot", "driftwood", "foxglove", "galleon",  "harvest",
      "ivory",     "jasmine",   "kestrel",   "lighthouse","mulberry", "nutmeg",   "orchard",
      "paprika",   "quince",    "rosemary",  "sorrel",    "tamarind", "umber",    "verbena",
      "wisteria",  "yarrow",    "zephyr",    "anchor",    "bramble",  "cinnamon", "dovecote",
      "elderberry","fennel",    "gingham",   "hawthorn",  "iris",     "jackdaw",  "kiln",
      "loom",      "mosaic",    "nettle",    "oleander",  "pimento",  "quill",    "rambler",
      "sparrow",   "tansy",     "ursa",      "vellum",    "wren",     "yonder",   "zinnia",
      "almanac",   "bellows",   "compass",   "dumpling",  "estuary",  "falcon",   "gaslight",
      "hearth",    "inkwell",   "jubilee",   "keepsake",  "lodestar", "mandolin", "noontide",
      "oriole",    "parable",   "quarry",    "ricochet",  "skylark",  "trellis",  "undertow",
      "vesper",    "waypoint",  "xylem",     "yewtree",   "zodiac",   "bobbin"};
  return v;
}

inline const std::vector<std::string>& cuisines() {
  static const std::vector<std::string> v = {
      "chinese",  "italian",  "indian",   "french",   "thai",     "japanese", "korean",
      "mexican",  "spanish",  "greek",    "turkish",  "lebanese", "moroccan", "vietnamese",
      "british",  "polish",   "german",   "brazilian","peruvian", "ethiopian","persian",
      "malaysian","hungarian","austrian", "cuban",    "danish"};
  return v;
}

inline const std::vector<std::string>& adjectives() {
  static const std::vector<std::string> v = {
      "delicious", "spicy",    "fresh",    "crispy",   "savory",   "tender",   "hearty",
      "fragrant",  "smoky",    "tangy",    "creamy",   "zesty",    "rustic",   "delicate",
      "rich",      "mild",     "robust",   "buttery",  "golden",   "juicy",    "crunchy",
      "velvety",   "earthy",   "peppery",  "sweet",    "silky",    "warming",  "bright",
      "generous",  "famous",   "seasonal", "homemade", "authentic","colorful", "aromatic",
      "glorious",  "humble",   "legendary","satisfying","wholesome"};
  return v;
}

inline const std::vector<std::string>& areas() {
  static const std::vector<std::string> v = {"north", "south", "east",   "west",
                                             "centre", "riverside", "uptown", "downtown",
                                             "harbourside", "oldtown", "midtown", "parkside"};
  return v;
}

// One landmark per area, same order as areas().
inline const std::vector<std::string>& landmarks() {
  static const std::vector<std::string> v = {"granary",  "boardwalk", "arcade", "windmill",
                                             "fountain", "ferry",     "terrace", "tramline",
                                             "jetty",    "belltower", "plaza",   "bandstand"};
  return v;
}

inline const std::vector<std::string>& prices() {
  static const std::vector<std::string> v = {"cheap",     "moderate", "expensive", "luxury",
                                             "budget",    "premium",  "affordable", "lavish"};
  return v;
}

// One table prop per price tier, same order as prices().
inline const std::vector<std::string>& price_props() {
  static const std::vector<std::string> v = {"coins",    "banknotes", "goldleaf", "caviar",
                                             "pennies",  "truffles",  "tokens",   "champagne"};
  return v;
}

inline const std::vector<std::string>& info_words() {
  static const std::vector<std::string> v = {"phone",  "address", "postcode",
                                             "rating", "website", "timetable"};
  return v;
}

// Two signature dishes per cuisine, in cuisine order: dish 2i and 2i+1
// belong to cuisine i. The pairing gives masked-token prediction a learnable
// cuisine <-> dish association.
inline const std::vector<std::string>& dishes() {
  static const std::vector<std::string> v = {
      "noodles",   "dumplings",  // chinese
      "risotto",   "lasagna",    // italian
      "curry",     "biryani",    // indian
      "terrine",   "croquettes", // french
      "laksa",     "padthai",    // thai
      "sushi",     "tempura",    // japanese
      "bibimbap",  "bulgogi",    // korean
      "tacos",     "enchiladas", // mexican
      "paella",    "churros",    // spanish
      "souvlaki",  "moussaka",   // greek
      "kebabs",    "baklava",    // turkish
      "falafel",   "tabbouleh",  // lebanese
      "tagine",    "couscous",   // moroccan
      "pho",       "banhmi",     // vietnamese
      "crumpets",  "trifle",     // british
      "pierogi",   "bigos",      // polish
      "schnitzel", "strudel",    // german
      "feijoada",  "coxinha",    // brazilian
      "ceviche",   "quinoa",     // peruvian
      "injera",    "wat",        // ethiopian
      "kashk",     "tahdig",     // persian
      "rendang",   "satay",      // malaysian
      "goulash",   "langos",     // hungarian
      "knodel",    "sachertorte",// austrian
      "ropavieja", "tostones",   // cuban
      "smorrebrod","aebleskiver" // danish
  };
  return v;
}

inline const std::vector<std::string>& persons() {
  static const std::vector<std::string> v = {
      "alice", "bruno", "carmen", "dieter", "elena",  "felix",  "greta",  "hassan",
      "ingrid","jonas", "katya",  "liam",   "marta",  "nadia",  "otto",   "priya",
      "quentin","rosa", "stefan", "talia",  "umberto","viola",  "wanda",  "xenia",
      "yusuf", "zelda", "amara",  "boris",  "celine", "dmitri"};
  return v;
}

// Sentence skeletons. {dish} draws any dish; {cdish} draws one of the
// sentence cuisine's two signature dishes; {larea} and {pprop} agree with
// the sentence's {area} and {price}.
inline const std::vector<std::string>& templates() {
  static const std::vector<std::string> v = {
      "the {name} restaurant serves {adj} {cuisine} food in the {area} part of town",
      "you can order {adj} {cdish} at any {cuisine} kitchen near the {area} quarter",
      "{person} says the {dish} at the {name} is really {adj}",
      "there is a {price} {cuisine} place called the {name} in the {area} area",
      "the {name} offers {cuisine} dishes like {cdish} at a {price} price",
      "my favourite {cuisine} restaurant is the {name} in the {area} district",
      "the {dish} there comes with a {adj} sauce and a {adj} salad",
      "{person} booked a table at the {name} for some {adj} {cuisine} food",
      "if you want {price} dining try the {name} by the {larea} in the {area} end of town",
      "the menu lists {cdish} and {cdish} under the {cuisine} specials",
      "locals say the {area} quarter behind the {larea} has the most {adj} {cuisine} kitchens",
      "a {price} menu at the {name} usually includes {dish} with {adj} bread",
      "{person} recommends the {adj} {cdish} from the best {cuisine} cook in town",
      "waiters at the {name} bring {adj} {dish} to every table in the {area} room",
      "walk from the {larea} into the {area} quarter for a {price} evening with {pprop}",
      "every {price} dinner at the {name} ends with {pprop} and a {adj} {dish}",
      "guests can ask for the {info} of the {name} at the front desk",
      "the printed {info} hangs next to the {larea} map in the {area} hall"};
  return v;
}

// Zipf-shaped pick: low ranks dominate, so masked-token prediction has
// learnable statistics while the tail keeps the vocabulary broad.
inline const std::string& zipf_pick(const std::vector<std::string>& words, Rng& rng) {
  static thread_local std::map<const std::vector<std::string>*, std::vector<double>> cum_cache;
  auto& cum = cum_cache[&words];
  if (cum.empty()) {
    cum.resize(words.size());
    double total = 0.0;
    for (size_t i = 0; i < words.size(); ++i) {
      total += 1.0 / static_cast<double>(i + 1);
      cum[i] = total;
    }
    for (double& c : cum) c /= total;
  }
  double u = rng.uniform();
  size_t idx = std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
  return words[std::min(idx, words.size() - 1)];
}

inline size_t zipf_index(size_t n, Rng& rng) {
  std::vector<double> cum(n);
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    total += 1.0 / static_cast<double>(i + 1);
    cum[i] = total;
  }
  double u = rng.uniform() * total;
  return std::min<size_t>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin(), n - 1);
}

inline std::string fill_template(const std::string& tmpl, Rng& rng) {
  // The sentence's cuisine, area and price are fixed up front so the
  // dependent placeholders agree no matter where they sit in the skeleton.
  size_t cuisine_idx = zipf_index(cuisines().size(), rng);
  size_t area_idx = zipf_index(areas().size(), rng);
  size_t price_idx = zipf_index(prices().size(), rng);
  std::string out;
  size_t pos = 0;
  while (pos < tmpl.size()) {
    size_t open = tmpl.find('{', pos);
    if (open == std::string::npos) {
      out += tmpl.substr(pos);
      break;
    }
    out += tmpl.substr(pos, open - pos);
    size_t close = tmpl.find('}', open);
    std::string key = tmpl.substr(open + 1, close - open - 1);
    if (key == "name") out += zipf_pick(names(), rng);
    else if (key == "cuisine") out += cuisines()[cuisine_idx];
    else if (key == "cdish") out += dishes()[2 * cuisine_idx + rng.below(2)];
    else if (key == "area") out += areas()[area_idx];
    else if (key == "larea") out += landmarks()[area_idx];
    else if (key == "price") out += prices()[price_idx];
    else if (key == "pprop") out += price_props()[price_idx];
    else if (key == "info") out += zipf_pick(info_words(), rng);
    else if (key == "adj") out += zipf_pick(adjectives(), rng);
    else if (key == "dish") out += zipf_pick(dishes(), rng);
    else if (key == "person") out += zipf_pick(persons(), rng);
    else out += key;
    pos = close + 1;
  }
  return out;
}

}  // namespace grammar

// Deterministic template-grammar sentences, one per line.
inline std::vector<std::string> generate_synthetic_corpus(uint64_t seed, int count) {
  require(count >= 1, Errc::invalid_spec, "sentence count must be >= 1");
  std::vector<std::string> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    const auto& tmpls = grammar::templates();
    const std::string& tmpl = tmpls[rng.below(tmpls.size())];
    out.push_back(grammar::fill_template(tmpl, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dialog domain
// ---------------------------------------------------------------------------

struct SyntheticDomainSpec {
  Ontology ontology;
  std::map<std::string, std::vector<std::string>> inform_templates;  // {v} = value
  std::map<std::string, std::vector<std::string>> change_templates;  // {v} = value
  std::vector<std::string> request_templates;                        // {s} = slot
  std::vector<std::string> closing_templates;                        // no-label turns
  std::vector<std::string> system_templates;                         // value-free
  int train_dialogs = 300;
  int dev_dialogs = 50;
  int test_dialogs = 50;
  int min_turns = 2;
  int max_turns = 5;
  uint64_t seed = 7;
};

inline SyntheticDomainSpec default_domain_spec() {
  SyntheticDomainSpec spec;
  spec.ontology.informable = {
      {"food", {"british", "chinese", "french", "indian", "italian"}},
      {"area", {"north", "south", "east", "west", "centre"}},
      {"price", {"cheap", "moderate", "expensive", "luxury", "budget"}},
  };
  spec.ontology.requestable = {"phone", "address", "postcode", "rating"};
  spec.inform_templates = {
      {"food",
       {"i want {v} food", "i would like some {v} food", "can you find {v} food for me",
        "looking for a place that serves {v} dishes"}},
      {"area",
       {"somewhere in the {v} part of town", "i want a place in the {v} area",
        "the {v} side of the city please", "it should be in the {v} area"}},
      {"price",
       {"in the {v} price range", "i want something {v} priced",
        "a {v} restaurant would be nice", "keep it {v} please"}},
  };
  spec.change_templates = {
      {"food", {"actually i would prefer {v} food instead", "change the food to {v} please"}},
      {"area", {"actually make it the {v} area instead", "change the area to {v} please"}},
      {"price",
       {"actually i want the {v} price range instead", "change the price to {v} please"}},
  };
  spec.request_templates = {"can i get the {s}", "what is the {s} of the place",
                            "please tell me the {s}", "could you give me the {s}"};
  spec.closing_templates = {"thank you so much goodbye", "that sounds perfect thanks",
                            "ok great that works for me"};
  spec.system_templates = {"what kind of food would you like",
                           "which part of town do you prefer",
                           "what price range are you looking for",
                           "i found a matching restaurant for you",
                           "anything else i can help with",
                           "here is a place that fits your needs"};
  return spec;
}

inline void validate_domain_spec(const SyntheticDomainSpec& spec) {
  validate_ontology(spec.ontology);
  require(spec.train_dialogs >= 0 && spec.dev_dialogs >= 0 && spec.test_dialogs >= 0,
          Errc::invalid_spec, "dialog counts must be non-negative");
  require(spec.train_dialogs + spec.dev_dialogs + spec.test_dialogs > 0, Errc::invalid_spec,
          "at least one dialog required");
  require(spec.min_turns >= 1 && spec.max_turns >= spec.min_turns, Errc::invalid_spec,
          "bad turns-per-dialog range");
  for (const auto& [slot, tmpls] : spec.inform_templates)
    require(spec.ontology.informable.count(slot), Errc::invalid_spec,
            "inform template for undeclared slot '" + slot + "'");
  for (const auto& [slot, tmpls] : spec.change_templates)
    require(spec.ontology.informable.count(slot), Errc::invalid_spec,
            "change template for undeclared slot '" + slot + "'");
  for (const auto& [slot, values] : spec.ontology.informable) {
    require(spec.inform_templates.count(slot) && !spec.inform_templates.at(slot).empty(),
            Errc::invalid_spec, "no inform template for slot '" + slot + "'");
    (void)values;
  }
  require(!spec.closing_templates.empty() && !spec.system_templates.empty(), Errc::invalid_spec,
          "closing and system templates required");
  if (!spec.ontology.requestable.empty())
    require(!spec.request_templates.empty(), Errc::invalid_spec, "request templates required");
}

struct SyntheticDomain {
  Ontology ontology;
  std::vector<LabeledDialog> train, dev, test;
};

namespace detail {

inline std::string substitute(std::string tmpl, const std::string& key, const std::string& value) {
  size_t pos;
  while ((pos = tmpl.find(key)) != std::string::npos) tmpl.replace(pos, key.size(), value);
  return tmpl;
}

template <typename V>
const V& pick(const std::vector<V>& v, Rng& rng) {
  return v[rng.below(v.size())];
}

inline LabeledDialog generate_dialog(const SyntheticDomainSpec& spec, Rng& rng) {
  std::vector<std::string> slots;
  for (const auto& [slot, values] : spec.ontology.informable) slots.push_back(slot);

  LabeledDialog dialog;
  DialogState state;
  std::map<std::string, std::string> informed;
  int n_turns = spec.min_turns + static_cast<int>(rng.below(spec.max_turns - spec.min_turns + 1));

  for (int t = 0; t < n_turns; ++t) {
    DialogTurn turn;
    turn.system_utterance = (t == 0) ? "" : detail::pick(spec.system_templates, rng);

    std::vector<std::string> clauses;
    auto add_inform = [&](const std::string& slot, bool change) {
      const auto& values = spec.ontology.informable.at(slot);
      std::string value;
      do {
        value = detail::pick(values, rng);
      } while (change && values.size() > 1 && value == informed[slot]);
      const auto& table = change && spec.change_templates.count(slot)
                              ? spec.change_templates.at(slot)
                              : spec.inform_templates.at(slot);
      clauses.push_back(substitute(detail::pick(table, rng), "{v}", value));
      turn.gold_turn_label.push_back({slot, value});
      informed[slot] = value;
    };
    auto add_request = [&]() {
      const std::string& slot = detail::pick(spec.ontology.requestable, rng);
      for (const Candidate& c : turn.gold_turn_label)
        if (c.is_request() && c.value == slot) return;
      clauses.push_back(substitute(detail::pick(spec.request_templates, rng), "{s}", slot));
      turn.gold_turn_label.push_back({kRequestSlot, slot});
    };

    std::vector<std::string> uninformed;
    for (const std::string& s : slots)
      if (!informed.count(s)) uninformed.push_back(s);

    if (t == 0) {
      rng.shuffle(uninformed);
      int k = 1 + static_cast<int>(rng.below(std::min<size_t>(2, uninformed.size())));
      for (int i = 0; i < k; ++i) add_inform(uninformed[i], false);
    } else {
      uint64_t roll = rng.below(100);
      if (roll < 35 && !uninformed.empty()) {
        rng.shuffle(uninformed);
        int k = 1 + static_cast<int>(rng.below(std::min<size_t>(2, uninformed.size())));
        for (int i = 0; i < k; ++i) add_inform(uninformed[i], false);
        if (!spec.ontology.requestable.empty() && rng.below(100) < 25) add_request();
      } else if (roll < 55 && !informed.empty()) {
        std::vector<std::string> done;
        for (const auto& [s, v] : informed) done.push_back(s);
        add_inform(detail::pick(done, rng), true);
      } else if (roll < 85 && !spec.ontology.requestable.empty()) {
        add_request();
        if (rng.below(100) < 30) add_request();
      } else {
        clauses.push_back(detail::pick(spec.closing_templates, rng));
      }
      if (clauses.empty()) clauses.push_back(detail::pick(spec.closing_templates, rng));
    }

    turn.user_utterance = clauses[0];
    for (size_t i = 1; i < clauses.size(); ++i) turn.user_utterance += " and " + clauses[i];

    state = update_state(state, turn.gold_turn_label);
    dialog.turns.push_back(std::move(turn));
    dialog.gold_states.push_back(state);
  }
  return dialog;
}

}  // namespace detail

// Scripted dialogs with gold turn labels and cumulative states obtained by
// folding those labels through update_state. Byte-identical for a given
// spec.
inline SyntheticDomain generate_synthetic_domain(const SyntheticDomainSpec& spec) {
  validate_domain_spec(spec);
  SyntheticDomain domain;
  domain.ontology = spec.ontology;
  auto make_split = [&](int count, uint64_t tag) {
    std::vector<LabeledDialog> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
      Rng rng(derive_seed(spec.seed, tag * 1000003ULL + static_cast<uint64_t>(i)));
      out.push_back(detail::generate_dialog(spec, rng));
    }
    return out;
  };
  domain.train = make_split(spec.train_dialogs, 1);
  domain.dev = make_split(spec.dev_dialogs, 2);
  domain.test = make_split(spec.test_dialogs, 3);
  return domain;
}

// Text corpus for vocabulary building: every training utterance plus every
// candidate rendering, so scoring inputs never fall back to [UNK].
inline std::vector<std::string> domain_training_corpus(const SyntheticDomain& domain) {
  std::vector<std::string> out;
  for (const LabeledDialog& dialog : domain.train)
    for (const DialogTurn& turn : dialog.turns) {
      if (!turn.system_utterance.empty()) out.push_back(turn.system_utterance);
      out.push_back(turn.user_utterance);
    }
  for (const Candidate& c : enumerate_candidates(domain.ontology)) out.push_back(c.text());
  return out;
}

}  // namespace dstd
