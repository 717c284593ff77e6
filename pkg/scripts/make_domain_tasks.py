"""Write the bundled task configs under tasks/.

The three domain tasks (pandemic, traffic, swissmetro) ship their expert
templates, prompts and initial graphs together with one worked example
record each; bring your own data file to optimise on them.  The planted
task is synthetic and complete, and runs offline with its scripted backend.

    python scripts/make_domain_tasks.py [--out tasks]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from scgprompt.dataset import Block, RecordTable, TaskSpec, save_task
from scgprompt.scenarios import planted_task

PANDEMIC_SCG = """Causal Statement 1: [Demographic Information] affects [Vaccination Coverage] and [Restriction Policy Response].
Older or vulnerable populations often have higher vaccination uptake and are more likely to be targeted by stricter restrictions.

Causal Statement 2: [Healthcare System Condition] affects [Vaccination Coverage] and [Population Immunity].
Regions with better healthcare access can distribute vaccines more effectively and maintain higher baseline immunity.

Causal Statement 3: [ICU and Hospital Staffing Condition] affects [Restriction Policy Response].
When ICU beds are full or staffing is limited, governments tend to implement stricter control policies.

Causal Statement 4: [Vaccination Coverage] affects [Population Immunity].
Higher vaccination coverage directly increases the proportion of immune individuals in the population.

Causal Statement 5: [Population Immunity] affects [Reported Cases per 100k] and [Hospitalization per 100k].
Stronger immunity reduces both the number of new infections and the chance of severe cases needing hospitalization.

Causal Statement 6: [Reported Cases per 100k] affects [Hospitalization per 100k] and [Restriction Policy Response].
A rise in reported cases usually precedes more hospital admissions and can trigger policy tightening.

Causal Statement 7: [Hospitalization per 100k] affects [Restriction Policy Response].
High hospitalization levels often lead to immediate government intervention to limit further spread.

Causal Statement 8: [Hospitalization per 100k] and [Restriction Policy Response] affect [Change of Hospitalization Next Week].
The trends of hospitalization in past weeks have strong relation with change of hospitalization next week."""

TRAFFIC_SCG = """Causal Statement 1: [Person Status] affects [Severity].
The driver's Blood Alcohol Content (BAC) significantly increases the probability of fatal crashes.

Causal Statement 2: [Position] affects [Severity].
Work zones can increase the probability of serious and fatal crashes. Driving in work zones after drinking is especially likely to cause severe or fatal crashes.

Causal Statement 3: [Driver Behavior] affects [Severity].
Aggressive driving and impairment-related behavior pose higher risk than other driver behaviors."""

SWISSMETRO_SCG = """Causal Statement 1: [Gender] and [Age] affect [Trip Purpose] and [Luggage].
Younger travelers are more likely to travel for education or leisure and carry luggage; older travelers more often travel for business with less luggage.

Causal Statement 2: [Income] affects [First Class], [Rail Pass], and [Trip_Paid_By].
High-income travelers are more likely to choose first class, own a rail pass, and pay for the trip themselves.

Causal Statement 3: [Trip Purpose] affects [Trip_Paid_By] and [Luggage].
Business trips are often employer-paid and involve less luggage; leisure trips are usually self-paid and involve more.

Causal Statement 4: [Origin and Destination] determine [Travel Options], [Travel Time], and [Headway].
Major city pairs offer more modes, shorter travel time, and higher frequency.

Causal Statement 5: [Trip Purpose] affects [Travel Mode Choice].
Business travelers tend to prefer faster, more reliable modes; leisure travelers may prioritize cost or flexibility.

Causal Statement 6: [First Class] affects [Travel Mode Choice].
Travelers choosing first class are more likely to select Train or Swissmetro over Car for comfort.

Causal Statement 7: [Rail Pass] affects [Travel Mode Choice].
Travelers with a rail pass are more likely to use Train or Swissmetro due to lower perceived cost.

Causal Statement 8: [Luggage] affects [Travel Mode Choice].
Travelers with heavy or bulky luggage may prefer Train or Car.

Causal Statement 9: [Trip_Paid_By] affects [Travel Mode Choice].
If the trip is employer-paid, travelers tend to choose faster or more comfortable modes like Swissmetro; if self-paid, they prefer cheaper options like standard Train or Car.

Causal Statement 10: [Travel Time] and [Headway] affect [Travel Mode Choice].
Business travelers are more sensitive to time and prefer faster and frequent modes; leisure travelers may tolerate longer travel time or wait if the mode is cheaper or more flexible."""

CAUSAL_PROMPT = ("You are a domain analyst. Using the causal relations and the case details, explain which "
                 "relations apply to this case and how they bear on the outcome to be predicted.")


def _output_format(labels, extra: str = "") -> str:
    listed = ", ".join(f"<{x}>" for x in labels)
    return (f"Provide a single prediction enclosed in < > using one of the following labels: {listed}.\n"
            + (extra + "\n" if extra else "")
            + "The final line of your response must follow this format: <VALUE>, where VALUE is your prediction.")


def pandemic() -> tuple[TaskSpec, RecordTable]:
    labels = ("substantial decreasing", "moderate decreasing", "stable", "moderate increasing",
              "substantial increasing")
    blocks = (
        Block("Demographic Information", "{demographic}"),
        Block("Healthcare System Condition", "{healthcare}"),
        Block("ICU and Hospital Staffing Condition", "{icu_staffing}"),
        Block("Vaccination Coverage", "{vaccination}"),
        Block("Population Immunity", "{immunity}"),
        Block("Restriction Policy Response", "{restriction}"),
        Block("Hospitalization per 100k", "{hospitalization}"),
        Block("Reported Cases per 100k", "{cases}"),
    )
    spec = TaskSpec(
        name="pandemic", labels=labels, blocks=blocks, candidates=tuple(b.name for b in blocks),
        description_tag="Pandemic Description",
        system_prompt=("Predict the trend of hospitalizations for the next week based on the pandemic details "
                       "provided between <Pandemic Description> and </Pandemic Description>."),
        causal_system_prompt=CAUSAL_PROMPT,
        output_format=_output_format(labels, "Definitions:\n"
                                     "- \"Substantial\" refers to changes greater than 3.\n"
                                     "- \"Moderate\" corresponds to changes between 1 and 3.\n"
                                     "- \"Stable\" is defined as changes between -1 and 1."),
        initial_scg=PANDEMIC_SCG, outcome_node="Change of Hospitalization Next Week", data="data.csv",
    )
    row = {
        "id": "vt-example",
        "demographic": "Vermont, with one of the smallest populations and one of the smallest Black demographic "
                       "groups, voted Democratic in the recent Presidential election.",
        "healthcare": "During the pandemic, Vermont's healthcare systems performed among the best, with "
                      "above-national-average Access and Affordability, excellent Prevention and Treatment, "
                      "better-than-average population health conditions, and reduced Income Disparity.",
        "icu_staffing": "Vermont had ICU stress levels near the national average, but hospital staffing "
                        "shortages worse than the national average.",
        "vaccination": "As of now, 81% of the population has received at least one vaccine dose (Rapid Increase "
                       "trend), 71% are fully vaccinated (Moderate Increase trend), and 23% received boosters "
                       "(Rapid Increase trend).",
        "immunity": "Around 28% of the population reported infections in the past three months, and population "
                    "immunity is showing a Rapid Increase.",
        "restriction": "School closures were recommended, but there were no restrictions for workplaces or "
                       "gatherings among elderly patients. Isolation was recommended, and visitor restrictions "
                       "were in place.",
        "hospitalization": "The average number of COVID-19 hospitalizations per 100K over the past five weeks was "
                           "9.8. Hospitalizations remained relatively stable, mostly between 9.0 and 11.2. A "
                           "slight increase was observed in the most recent week, with a rate of change of 1.2. "
                           "Volatility in hospitalization numbers was minimal, indicating consistent trends.",
        "cases": "In the most recent five weeks, reported COVID-19 cases per 100K showed a fluctuating trend. The "
                 "average was 292.6. Cases declined from 263.8 to 216.0 over the first three weeks, then sharply "
                 "increased to 340.1 in the fourth week and 398.7 in the fifth. These changes indicate a "
                 "significant uptick in recent weeks, with inconsistent weekly trends.",
        "label": "moderate increasing",
    }
    return spec, _table(labels, row)


def traffic() -> tuple[TaskSpec, RecordTable]:
    labels = ("no apparent injury", "minor injury", "serious injury", "fatal")
    blocks = (
        Block("Time", "The crash occurred on {date} at hour {hour}."),
        Block("Position", "{position}"),
        Block("Dynamic Conditions", "The light condition is {light} and the weather condition is {weather}."),
        Block("Infrastructure", "{infrastructure}"),
        Block("Road Surface", "The road surface condition is {surface}. The road defect condition is {defect}."),
        Block("Road Level", "{road_level}"),
        Block("Driver Behavior", "{driver_behavior}"),
        Block("Vehicle Information", "{vehicle_info}"),
        Block("Vehicle Status", "{vehicle_status}"),
        Block("Person Information", "{person_info}"),
        Block("Person Status", "{person_status}"),
    )
    spec = TaskSpec(
        name="traffic", labels=labels, blocks=blocks, candidates=tuple(b.name for b in blocks),
        description_tag="Crash Description",
        system_prompt=("Predict the crash severity reasoning on the causal descriptions and the crash event "
                       "details provided between <Crash Description> and </Crash Description>."),
        causal_system_prompt=CAUSAL_PROMPT,
        output_format=_output_format(labels),
        initial_scg=TRAFFIC_SCG, outcome_node="Severity", data="data.csv",
    )
    row = {
        "id": "champaign-example", "date": "April 29, 2022", "hour": "16",
        "position": "The crash occurred in Champaign, within an Unincorporated area. It did not occur in a work zone.",
        "light": "Daylight", "weather": "Clear",
        "infrastructure": "The crash is not at an intersection. The traffic control device is Other Regulatory Sig.",
        "surface": "Dry", "defect": "",
        "road_level": "The trafficway is Not Divided Two-way. The functional class of the roadway is Minor "
                      "Arterial. The roadway class is Rural 2 Lane Roads.",
        "driver_behavior": "The primary behavior is Driving On Wrong Side/Wrong Way, and the secondary behavior is "
                           "Improper Lane Usage. The crash is not a hit-and-run incident.",
        "vehicle_info": "Vehicle 1 had a defect of None and was manufactured in 2004. Vehicle 2 had a defect of "
                        "None and was manufactured in 2002.",
        "vehicle_status": "Vehicle 1 locates at On Pavement (Roadway); its maneuver prior to the crash was "
                          "Passing/Overtaking and it was traveling in the North direction. Vehicle 2 locates at "
                          "On Pavement (Roadway); its maneuver prior to the crash was Straight Ahead and it was "
                          "traveling in the South direction.",
        "person_info": "Person 1 was in Vehicle Unit 1, a Driver aged 39, Male. Person 2 was in Vehicle Unit 2, "
                       "a Driver aged 70, Male.",
        "person_status": "Person 1: blood alcohol content .000, distraction No, Shoulder and Lap Belt Used. "
                         "Person 2: blood alcohol content Not Tested, distraction No, Shoulder and Lap Belt Used.",
        "label": "fatal",
    }
    return spec, _table(labels, row)


def swissmetro() -> tuple[TaskSpec, RecordTable]:
    labels = ("swissmetro", "car", "train")
    blocks = (
        Block("Trip Purpose", "The purpose of the trip is {purpose}."),
        Block("Trip_Paid_By", "Traveler trip is paid by {paid_by}."),
        Block("Luggage", "Traveler has {luggage}."),
        Block("First Class", "The traveler {first_class}."),
        Block("Rail Pass", "Traveler {rail_pass}."),
        Block("Origin and Destination", "This trip starts at {origin} and ends at {destination}."),
        Block("Travel Options", "Traveler has {options} possible travel options."),
        Block("Travel Time", "{travel_time}"),
        Block("Headway", "{headway}"),
        Block("Income", "Traveler's annual income is {income}."),
        Block("Age", "The traveler is {age} years old."),
        Block("Gender", "The traveler is {gender}."),
    )
    spec = TaskSpec(
        name="swissmetro", labels=labels, blocks=blocks, candidates=tuple(b.name for b in blocks),
        description_tag="Traveler Description",
        system_prompt=("Predict the travel mode choice reasoning on the causal descriptions and the traveler "
                       "details provided between <Traveler Description> and </Traveler Description>."),
        causal_system_prompt=CAUSAL_PROMPT,
        output_format=_output_format(labels),
        initial_scg=SWISSMETRO_SCG, outcome_node="Travel Mode Choice", data="data.csv",
    )
    row = {
        "id": "vd-zh-example", "purpose": "business", "paid_by": "oneself", "luggage": "no luggage",
        "first_class": "does not travel in first class",
        "rail_pass": "does not have a rail-system annual season ticket",
        "origin": "VD", "destination": "ZH", "options": "two",
        "travel_time": "Swissmetro's travel time is 63 minutes and it costs 57 CHF. Train's travel time is "
                       "192 minutes and it costs 52 CHF.",
        "headway": "The headway of Swissmetro is 10 minutes. The headway of train is 30 minutes.",
        "income": "between 50,000 and 100,000 CHF", "age": "between 39 and 54", "gender": "female",
        "label": "car",
    }
    return spec, _table(labels, row)


def _table(labels, row: dict) -> RecordTable:
    return RecordTable(labels, {row["id"]: dict(row)}, {row["id"]: row["label"]})


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tasks"))
    args = parser.parse_args(argv)
    out = Path(args.out)
    for name, build in (("pandemic", pandemic), ("traffic", traffic), ("swissmetro", swissmetro),
                        ("planted", planted_task)):
        spec, table = build()
        # round-trip through the loader so a broken config fails here, not later
        TaskSpec.from_dict(spec.to_dict())
        print(save_task(spec, table, out / name))


if __name__ == "__main__":
    main()
