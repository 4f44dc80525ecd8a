#include "vplan/corpus.hpp"

#include <algorithm>
#include <sstream>

namespace vplan {

namespace {

const char* const kSpecialText[SpecialTokens::count] = {"<pad>",        "<sep>",   "<bor>", "<eos>",
                                                        "<goal_image>", "<frame>", "<unk>"};

}  // namespace

void ActionVocab::finalize(const std::vector<std::string>& extra_words_in) {
    extra_words = extra_words_in;
    tokens_.clear();
    for (const char* s : kSpecialText) tokens_.emplace_back(s);

    auto add = [this](const std::string& w) {
        if (std::find(tokens_.begin(), tokens_.end(), w) == tokens_.end()) tokens_.push_back(w);
    };
    for (const auto& v : verbs) add(v);
    for (const auto& n : nouns) add(n);
    for (const auto& [before, after] : verb_states) {
        add(before);
        add(after);
    }
    for (const auto& w : extra_words) add(w);
    first_number_ = static_cast<TokenId>(tokens_.size());
    for (int n = 1; n <= kMaxListNumber; ++n) {
        const std::string w = std::to_string(n) + ".";
        if (std::find(tokens_.begin(), tokens_.end(), w) != tokens_.end()) {
            throw DataError("list number token collides with a word: " + w);
        }
        tokens_.push_back(w);
    }

    sorted_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) sorted_.emplace_back(tokens_[i], static_cast<TokenId>(i));
    std::sort(sorted_.begin(), sorted_.end());
}

const std::string& ActionVocab::token_text(TokenId id) const {
    if (id < 0 || id >= size()) throw DataError("token id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> ActionVocab::find(std::string_view word) const {
    auto it = std::lower_bound(sorted_.begin(), sorted_.end(), word,
                               [](const auto& entry, std::string_view w) { return entry.first < w; });
    if (it == sorted_.end() || it->first != word) return std::nullopt;
    return it->second;
}

TokenId ActionVocab::id(std::string_view word) const {
    if (auto t = find(word)) return *t;
    throw DataError("word not in vocabulary: '" + std::string(word) + "'");
}

std::string ActionVocab::action_text(ActionId a) const {
    const auto& label = actions.at(static_cast<std::size_t>(a));
    return verbs[static_cast<std::size_t>(label.verb)] + " " + nouns[static_cast<std::size_t>(label.noun)];
}

std::vector<TokenId> ActionVocab::action_tokens(ActionId a) const {
    const auto& label = actions.at(static_cast<std::size_t>(a));
    return {id(verbs[static_cast<std::size_t>(label.verb)]), id(nouns[static_cast<std::size_t>(label.noun)])};
}

std::optional<ActionId> ActionVocab::action_by_text(std::string_view text) const {
    // Labels are "verb noun"; both halves must be known words.
    const auto space = text.find(' ');
    if (space == std::string_view::npos) return std::nullopt;
    const auto verb = text.substr(0, space);
    const auto noun = text.substr(space + 1);
    auto vi = std::find(verbs.begin(), verbs.end(), verb);
    auto ni = std::find(nouns.begin(), nouns.end(), noun);
    if (vi == verbs.end() || ni == nouns.end()) return std::nullopt;
    const int v = static_cast<int>(vi - verbs.begin());
    const int n = static_cast<int>(ni - nouns.begin());
    for (std::size_t a = 0; a < actions.size(); ++a) {
        if (actions[a].verb == v && actions[a].noun == n) return static_cast<ActionId>(a);
    }
    return std::nullopt;
}

TokenId ActionVocab::number_token(int n) const {
    if (n < 1 || n > kMaxListNumber) throw DataError("list number out of range: " + std::to_string(n));
    return first_number_ + n - 1;
}

std::optional<int> ActionVocab::list_number(TokenId t) const {
    if (t >= first_number_ && t < first_number_ + kMaxListNumber) return t - first_number_ + 1;
    return std::nullopt;
}

std::vector<TokenId> tokenize(std::string_view text, const ActionVocab& vocab, UnknownWordPolicy policy) {
    std::vector<TokenId> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        while (pos < text.size() && text[pos] == ' ') ++pos;
        if (pos >= text.size()) break;
        std::size_t end = text.find(' ', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto word = text.substr(pos, end - pos);
        if (auto t = vocab.find(word)) {
            out.push_back(*t);
        } else if (policy == UnknownWordPolicy::substitute) {
            out.push_back(vocab.special.unk);
        } else {
            throw DataError("unknown word: '" + std::string(word) + "'");
        }
        pos = end;
    }
    return out;
}

std::string detokenize(std::span<const TokenId> ids, const ActionVocab& vocab) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out.push_back(' ');
        out += vocab.token_text(ids[i]);
    }
    return out;
}

}  // namespace vplan
