#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "bratlab/promptkit.hpp"
#include "bratlab/rng.hpp"
#include "bratlab/textstack.hpp"

using namespace bratlab;

namespace {

bool has(const TemplateSet& s, const std::string& t) {
    return std::find(s.templates.begin(), s.templates.end(), t) != s.templates.end();
}

}  // namespace

TEST_CASE("template set sizes are pinned") {
    CHECK(get_templates(Task::subject, Phase::train).templates.size() == 27);
    CHECK(get_templates(Task::style, Phase::train).templates.size() == 19);
    CHECK(get_templates(Task::subject, Phase::eval).templates.size() == 16);
    CHECK(get_templates(Task::style, Phase::eval).templates.size() == 16);
}

TEST_CASE("known members are present verbatim") {
    CHECK(has(get_templates(Task::subject, Phase::train), "a photo of a {}"));
    CHECK(has(get_templates(Task::subject, Phase::train), "a photo of a nice {}"));
    CHECK(has(get_templates(Task::style, Phase::train), "a painting, art by {}"));
    CHECK(has(get_templates(Task::style, Phase::train), "a cropped painting, art by {}"));
    CHECK(has(get_templates(Task::subject, Phase::eval), "a photo of {} wearing sunglasses"));
    CHECK(has(get_templates(Task::style, Phase::eval), "the beach, art by {}"));
}

TEST_CASE("render_template substitutes the single placeholder") {
    CHECK(render_template("a photo of a {}", "<sks>") == "a photo of a <sks>");
    CHECK(render_template("{} on the moon", "<sks> <fkf>") == "<sks> <fkf> on the moon");
    CHECK_THROWS_AS(render_template("no placeholder here", "<sks>"), LabError);
    CHECK_THROWS_AS(render_template("{} twice {}", "<sks>"), LabError);
}

TEST_CASE("sampling is seeded and deterministic") {
    auto set = get_templates(Task::subject, Phase::train);
    Rng a(99), b(99), c(100);
    std::vector<std::string> sa, sb, sc;
    for (int i = 0; i < 64; ++i) {
        sa.push_back(sample_template(set, a));
        sb.push_back(sample_template(set, b));
        sc.push_back(sample_template(set, c));
    }
    CHECK(sa == sb);
    CHECK(sa != sc);
}

TEST_CASE("sampling covers the set roughly uniformly") {
    auto set = get_templates(Task::subject, Phase::train);
    Rng rng(7);
    std::map<std::string, int> counts;
    const int n = 10000;
    for (int i = 0; i < n; ++i) counts[sample_template(set, rng)]++;
    CHECK(counts.size() == set.templates.size());
    for (const auto& [tmpl, cnt] : counts) {
        CHECK(cnt > 313);
        CHECK(cnt < 428);
    }
}

TEST_CASE("every template fits the prompt budget with the widest token string") {
    const std::string widest = "<sks> <fkf1> <fkf2> <fkf3>";
    for (Task task : {Task::subject, Task::style}) {
        for (Phase phase : {Phase::train, Phase::eval}) {
            for (const auto& t : get_templates(task, phase).templates) {
                auto words = split_words(render_template(t, widest));
                CHECK(words.size() <= 16);
            }
        }
    }
}

TEST_CASE("template files load and validate") {
    {
        std::ofstream f("/tmp/bratlab_tmpl_ok.txt");
        f << "a doodle of {}\n\na big {}\n";
    }
    auto set = load_template_file("/tmp/bratlab_tmpl_ok.txt", Task::subject, Phase::train);
    REQUIRE(set.templates.size() == 2);
    CHECK(set.templates[0] == "a doodle of {}");

    {
        std::ofstream f("/tmp/bratlab_tmpl_bad.txt");
        f << "a doodle of {}\nmissing placeholder\n";
    }
    CHECK_THROWS_AS(load_template_file("/tmp/bratlab_tmpl_bad.txt", Task::subject, Phase::train),
                    LabError);
    CHECK_THROWS_AS(load_template_file("/tmp/bratlab_no_such_file.txt", Task::subject, Phase::train),
                    LabError);
}

TEST_CASE("task names round-trip") {
    CHECK(task_name(Task::subject) == "subject");
    CHECK(task_name(Task::style) == "style");
    CHECK(task_from_name("subject") == Task::subject);
    CHECK(task_from_name("style") == Task::style);
    CHECK_THROWS_AS(task_from_name("portrait"), LabError);
}
