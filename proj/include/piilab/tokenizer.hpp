#pragma once

#include <array>
#include <cctype>
#include <map>
#include <string>
#include <vector>

#include "piilab/common.hpp"

namespace piilab {

// Word-level tokenizer over a closed vocabulary, with per-character fallback
// for email-like runs (anything containing '@' or shaped like a dotted
// identifier). Emails therefore span many tokens and recalling one requires a
// long chain of correct greedy steps.
enum class TokenKind : uint8_t { Special, Word, Punct, Char };

class Vocab {
public:
    int bos = -1, eos = -1, unk = -1;

    int size() const { return static_cast<int>(text_.size()); }
    const std::string& text(int id) const { return text_[id]; }
    TokenKind kind(int id) const { return kind_[id]; }

    // Inventory is fixed at build time; `word_sources` are scanned for word
    // runs and punctuation with the same scanner used by tokenize().
    static Vocab build(const std::vector<std::string>& word_sources) {
        Vocab v;
        v.bos = v.add("<bos>", TokenKind::Special);
        v.eos = v.add("<eos>", TokenKind::Special);
        v.unk = v.add("<unk>", TokenKind::Special);
        const std::string chars = "abcdefghijklmnopqrstuvwxyz0123456789.@";
        for (char c : chars) v.char_ids_[static_cast<unsigned char>(c)] = v.add(std::string(1, c), TokenKind::Char);
        std::map<std::string, bool> words;  // word -> is_punct, sorted for determinism
        for (const auto& src : word_sources) {
            scan(src, [&](const std::string& run, bool is_word) {
                if (is_word)
                    words.emplace(run, false);
                else
                    words.emplace(run, true);
            });
        }
        for (const auto& [w, is_punct] : words) {
            if (is_punct)
                v.punct_ids_[static_cast<unsigned char>(w[0])] = v.add(w, TokenKind::Punct);
            else
                v.word_ids_[w] = v.add(w, TokenKind::Word);
        }
        return v;
    }

    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> out;
        scan(text, [&](const std::string& run, bool is_word) {
            if (is_word) {
                if (is_charwise(run)) {
                    for (char c : run) {
                        const int id = char_ids_[static_cast<unsigned char>(c)];
                        out.push_back(id >= 0 ? id : unk);
                    }
                } else {
                    auto it = word_ids_.find(run);
                    out.push_back(it != word_ids_.end() ? it->second : unk);
                }
            } else {
                const int id = punct_ids_[static_cast<unsigned char>(run[0])];
                out.push_back(id >= 0 ? id : unk);
            }
        });
        return out;
    }

    // Renders tokens back to text. Char tokens concatenate without separators
    // so emails come out contiguous; word/punct tokens are space-separated.
    // Stops at <eos>; skips <bos>.
    std::string detokenize(const std::vector<int>& tokens) const {
        std::string out;
        bool prev_char = false;
        for (int id : tokens) {
            if (id == eos) break;
            if (id == bos) continue;
            const bool is_char = kind_[id] == TokenKind::Char;
            if (!out.empty() && !(is_char && prev_char)) out.push_back(' ');
            out += text_[id];
            prev_char = is_char;
        }
        return out;
    }

private:
    template <typename Fn>
    static void scan(const std::string& s, Fn&& emit) {
        const auto is_run_char = [](char c) {
            return std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '@' || c == '-' || c == '_' ||
                   c == '\'';
        };
        size_t i = 0;
        while (i < s.size()) {
            const char c = s[i];
            if (std::isspace(static_cast<unsigned char>(c))) {
                ++i;
                continue;
            }
            if (is_run_char(c)) {
                size_t j = i;
                while (j < s.size() && is_run_char(s[j])) ++j;
                emit(s.substr(i, j - i), true);
                i = j;
            } else {
                emit(std::string(1, c), false);
                ++i;
            }
        }
    }

    // A run goes to per-character fallback when it is email-like: contains an
    // '@', or is a dotted lowercase identifier ("corp.com", "notes.txt").
    static bool is_charwise(const std::string& run) {
        if (run.find('@') != std::string::npos) return true;
        bool has_dot = false;
        for (char c : run) {
            if (c == '.')
                has_dot = true;
            else if (!(std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c))))
                return false;
        }
        return has_dot && run.front() != '.' && run.back() != '.';
    }

    int add(std::string t, TokenKind k) {
        text_.push_back(std::move(t));
        kind_.push_back(k);
        return static_cast<int>(text_.size()) - 1;
    }

    static std::array<int, 256> minus_ones() {
        std::array<int, 256> a{};
        a.fill(-1);
        return a;
    }

    std::vector<std::string> text_;
    std::vector<TokenKind> kind_;
    std::map<std::string, int> word_ids_;
    std::array<int, 256> char_ids_ = minus_ones();
    std::array<int, 256> punct_ids_ = minus_ones();
};

}  // namespace piilab
