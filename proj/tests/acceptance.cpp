#include <algorithm>
#include <iostream>

#include "treenet.hpp"

int main() {
    treenet::VerifyOptions opt;
    opt.on_result = [](const treenet::CriterionResult& r) { std::cout << treenet::render_criterion(r) << std::flush; };
    opt.on_progress = [](const std::string& line) { std::cout << "       .. " << line << '\n' << std::flush; };
    const auto results = treenet::run_acceptance(opt);
    const auto passed = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.passed; });
    std::cout << passed << "/" << results.size() << " criteria passed\n";
    return passed == static_cast<long>(results.size()) ? 0 : 1;
}
