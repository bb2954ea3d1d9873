#include <algorithm>
#include <cmath>

#include "steerkit/error.hpp"
#include "steerkit/evalkit.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

namespace {

constexpr std::string_view kMarkerPalette = "#@%&$*+=";

const std::vector<std::vector<std::string>> kThemePools = {
    {"gardening", "tomatoes", "compost", "pruning roses", "seed starting"},
    {"marathon training", "interval runs", "running shoes", "recovery days", "hill repeats"},
    {"sourdough", "bread flour", "baking times", "proofing dough", "oven steam"},
    {"jazz piano", "chord voicings", "practice scales", "sight reading", "swing rhythm"},
    {"budget travel", "night trains", "packing light", "hostel stays", "rail passes"},
    {"home espresso", "grinder settings", "milk foam", "bean roasts", "extraction time"},
    {"bird watching", "field guides", "binocular choice", "dawn walks", "song calls"},
    {"chess openings", "endgame drills", "blitz games", "pawn structure", "tactics puzzles"},
};

const std::vector<std::vector<std::string>> kVocabularyPools = {
    {"lovely", "gentle", "calm", "cozy", "warm", "soft"},
    {"fast", "strong", "sharp", "bold", "quick", "hard"},
    {"rich", "golden", "crisp", "deep", "fresh", "sweet"},
    {"smooth", "bright", "cool", "light", "clean", "clear"},
    {"cheap", "simple", "small", "plain", "lean", "basic"},
    {"dark", "dense", "thick", "heavy", "full", "round"},
    {"quiet", "early", "patient", "still", "slow", "keen"},
    {"solid", "exact", "tight", "precise", "steady", "firm"},
};

const std::vector<std::string> kSharedWords = {"really", "maybe", "always", "often", "just", "truly", "mostly", "very"};

const std::vector<std::string> kTemplates = {"what do you think about {}?", "any tips on {}?",
                                             "how should i start with {}?", "tell me about {}",
                                             "what is best for {}?"};

std::string apply_casing(std::string word, Casing casing) {
  if (casing == Casing::kLower) return word;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if ((casing == Casing::kUpper || i == 0) && word[i] >= 'a' && word[i] <= 'z') word[i] = static_cast<char>(word[i] - 32);
  }
  return word;
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[rng.below(v.size())];
}

}  // namespace

void SynthSpec::validate() const {
  if (n_users < 1) throw InvalidArgument("n_users must be >= 1");
  if (records_per_user < 1) throw InvalidArgument("records_per_user must be >= 1");
  if (n_subpopulations < 1) throw InvalidArgument("n_subpopulations must be >= 1");
  if (styles.empty() && n_subpopulations > static_cast<int>(kMarkerPalette.size())) {
    throw InvalidArgument("at most " + std::to_string(kMarkerPalette.size()) + " built-in subpopulation styles");
  }
  if (!styles.empty() && static_cast<int>(styles.size()) != n_subpopulations) {
    throw InvalidArgument("styles must have one entry per subpopulation");
  }
  if (drift_point && !(*drift_point > 0 && *drift_point < 1)) throw InvalidArgument("drift_point must be in (0, 1)");
  if (!(drifting_user_fraction >= 0 && drifting_user_fraction <= 1)) {
    throw InvalidArgument("drifting_user_fraction must be in [0, 1]");
  }
  if (answer_words < 0) throw InvalidArgument("answer_words must be >= 0");
  for (const auto& s : styles) {
    if (s.themes.empty()) throw InvalidArgument("every style needs at least one theme");
    if (s.vocabulary.empty()) throw InvalidArgument("every style needs a vocabulary");
    if (!(s.vocabulary_bias >= 0 && s.vocabulary_bias <= 1)) throw InvalidArgument("vocabulary_bias must be in [0, 1]");
  }
}

std::vector<SubpopulationStyle> SynthSpec::resolved_styles() const {
  if (!styles.empty()) return styles;
  std::vector<SubpopulationStyle> out;
  for (int i = 0; i < n_subpopulations; ++i) {
    SubpopulationStyle s;
    s.marker = kMarkerPalette[i];
    s.casing = static_cast<Casing>(i % 3);
    s.themes = kThemePools[i];
    s.vocabulary = kVocabularyPools[i];
    out.push_back(std::move(s));
  }
  return out;
}

SynthCorpus synth_corpus(const SynthSpec& spec, double test_fraction) {
  spec.validate();
  SynthCorpus out;
  out.styles = spec.resolved_styles();
  const int n_sub = spec.n_subpopulations;

  std::vector<int> order(spec.n_users);
  for (int i = 0; i < spec.n_users; ++i) order[i] = i;
  Rng pick_rng(mix_seed(spec.seed, 0xD1F7));
  for (int i = spec.n_users - 1; i > 0; --i) std::swap(order[i], order[pick_rng.below(static_cast<std::uint64_t>(i) + 1)]);
  const int n_drifting =
      spec.drift_point ? static_cast<int>(std::lround(spec.drifting_user_fraction * spec.n_users)) : 0;
  std::vector<bool> drifting(spec.n_users, false);
  for (int i = 0; i < n_drifting; ++i) drifting[order[i]] = true;

  const int width = spec.n_users > 100 ? 3 : 2;
  std::vector<InteractionRecord> records;
  std::map<std::pair<std::string, std::int64_t>, RecordLabel> by_key;
  const int drift_index = spec.drift_point
                              ? static_cast<int>(std::ceil(*spec.drift_point * spec.records_per_user - 1e-9))
                              : spec.records_per_user;
  for (int u = 0; u < spec.n_users; ++u) {
    std::string user = std::to_string(u);
    user = "u" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(user.size()))), '0') + user;
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(u) + 1));
    const int home = u % n_sub;
    for (int i = 0; i < spec.records_per_user; ++i) {
      RecordLabel label;
      label.home_subpop = home;
      label.drifting_user = drifting[u];
      label.post_drift = drifting[u] && i >= drift_index;
      label.subpop = label.post_drift ? (home + 1) % n_sub : home;
      const auto& style = out.styles[label.subpop];

      std::string query = pick(kTemplates, rng);
      query.replace(query.find("{}"), 2, pick(style.themes, rng));
      std::string answer(1, style.marker);
      for (int k = 0; k < spec.answer_words; ++k) {
        const bool own = rng.uniform() < style.vocabulary_bias;
        answer += ' ';
        answer += apply_casing(own ? pick(style.vocabulary, rng) : pick(kSharedWords, rng), style.casing);
      }
      InteractionRecord rec;
      rec.user_id = user;
      rec.ts = 1'700'000'000 + static_cast<std::int64_t>(i) * 3600;
      rec.query = std::move(query);
      rec.answer = std::move(answer);
      by_key[{rec.user_id, rec.ts}] = label;
      records.push_back(std::move(rec));
    }
  }
  out.corpus = UserCorpus::from_records(std::move(records), test_fraction);
  for (const auto& user : out.corpus.users()) {
    for (const auto& rec : out.corpus.records(user)) out.labels[rec.id] = by_key.at({rec.user_id, rec.ts});
  }
  return out;
}

}  // namespace steerkit
