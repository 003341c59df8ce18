#pragma once

// Brute-force reference implementations used to check the library. They are
// written directly from the metric definitions and share no code with it.

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace oracle {

inline std::vector<std::string> split(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

// Per phrase: fraction of its words contained in the prediction string.
inline double word_recall(const std::map<std::string, std::string>& preds,
                          const std::map<std::string, std::vector<std::string>>& phrases) {
    double total = 0.0;
    for (const auto& [id, list] : phrases) {
        const std::string& pred = preds.at(id);
        double img = 0.0;
        for (const auto& phrase : list) {
            const auto words = split(phrase);
            int hit = 0;
            for (const auto& w : words) hit += pred.find(w) != std::string::npos ? 1 : 0;
            img += static_cast<double>(hit) / static_cast<double>(words.size());
        }
        total += img / static_cast<double>(list.size());
    }
    return total / static_cast<double>(phrases.size()) * 100.0;
}

using Counts = std::map<std::vector<std::string>, double>;

inline Counts ngrams(const std::vector<std::string>& w, std::size_t n) {
    Counts c;
    for (std::size_t i = 0; i + n <= w.size(); ++i) c[std::vector<std::string>(w.begin() + i, w.begin() + i + n)] += 1.0;
    return c;
}

// CIDEr-D: raw-count tf times log(N / max(1, df)), clipped dot product,
// Gaussian length penalty (sigma 6), averaged over references and n = 1..4,
// x10. Document frequency counts images whose reference set has the n-gram.
inline double cider_d(const std::map<std::string, std::string>& cands,
                      const std::map<std::string, std::vector<std::string>>& refs) {
    const double N = static_cast<double>(refs.size());
    std::vector<std::map<std::vector<std::string>, double>> df(5);
    for (const auto& [id, list] : refs)
        for (std::size_t n = 1; n <= 4; ++n) {
            std::map<std::vector<std::string>, bool> seen;
            for (const auto& r : list)
                for (const auto& [g, c] : ngrams(split(r), n)) seen[g] = true;
            for (const auto& [g, b] : seen) df[n][g] += 1.0;
        }
    auto weight = [&](std::size_t n, const std::vector<std::string>& g) {
        auto it = df[n].find(g);
        const double d = it == df[n].end() ? 0.0 : it->second;
        return std::log(N) - std::log(std::max(1.0, d));
    };
    double total = 0.0;
    for (const auto& [id, list] : refs) {
        const auto cw = split(cands.at(id));
        double img = 0.0;
        for (std::size_t n = 1; n <= 4; ++n) {
            double per_n = 0.0;
            for (const auto& r : list) {
                const auto rw = split(r);
                const Counts cc = ngrams(cw, n), rc = ngrams(rw, n);
                std::map<std::vector<std::string>, double> cv, rv;
                for (const auto& [g, c] : cc) cv[g] = c * weight(n, g);
                for (const auto& [g, c] : rc) rv[g] = c * weight(n, g);
                double nc = 0.0, nr = 0.0, dot = 0.0;
                for (const auto& [g, v] : cv) nc += v * v;
                for (const auto& [g, v] : rv) nr += v * v;
                for (const auto& [g, v] : cv) {
                    auto it = rv.find(g);
                    if (it != rv.end()) dot += std::min(v, it->second) * it->second;
                }
                const double delta = static_cast<double>(cw.size()) - static_cast<double>(rw.size());
                double sim = 0.0;
                if (nc > 0.0 && nr > 0.0) sim = dot / (std::sqrt(nc) * std::sqrt(nr));
                per_n += sim * std::exp(-(delta * delta) / (2.0 * 36.0));
            }
            img += per_n / static_cast<double>(list.size());
        }
        total += 10.0 * img / 4.0;
    }
    return total / N;
}

// Corpus BLEU-4, closest reference length (shorter on ties), no smoothing.
inline double bleu4(const std::map<std::string, std::string>& cands,
                    const std::map<std::string, std::vector<std::string>>& refs) {
    double match[5] = {0, 0, 0, 0, 0}, total[5] = {0, 0, 0, 0, 0};
    double c_len = 0.0, r_len = 0.0;
    for (const auto& [id, cand] : cands) {
        const auto cw = split(cand);
        c_len += static_cast<double>(cw.size());
        double best = -1.0;
        for (const auto& r : refs.at(id)) {
            const double l = static_cast<double>(split(r).size());
            const double d = std::abs(l - static_cast<double>(cw.size()));
            const double bd = std::abs(best - static_cast<double>(cw.size()));
            if (best < 0.0 || d < bd || (d == bd && l < best)) best = l;
        }
        r_len += best;
        for (std::size_t n = 1; n <= 4; ++n) {
            const Counts cc = ngrams(cw, n);
            for (const auto& [g, c] : cc) {
                double mx = 0.0;
                for (const auto& r : refs.at(id)) {
                    const Counts rc = ngrams(split(r), n);
                    auto it = rc.find(g);
                    if (it != rc.end()) mx = std::max(mx, it->second);
                }
                match[n] += std::min(c, mx);
                total[n] += c;
            }
        }
    }
    double logp = 0.0;
    for (int n = 1; n <= 4; ++n) {
        if (match[n] == 0.0 || total[n] == 0.0) return 0.0;
        logp += 0.25 * std::log(match[n] / total[n]);
    }
    const double bp = c_len >= r_len ? 1.0 : std::exp(1.0 - r_len / c_len);
    return 100.0 * bp * std::exp(logp);
}

}  // namespace oracle
