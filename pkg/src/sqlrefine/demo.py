"""Deterministic demo databases and a question/SQL corpus over them.

``build_demo(root)`` writes four small SQLite databases in the BIRD layout
(``root/<db_id>/<db_id>.sqlite``) and returns the corpus rows. The ``school``
database is the two-table running example used throughout the tests.
"""

from __future__ import annotations

import json
import random
import sqlite3
from pathlib import Path

SCHEMAS = {
    "school": """
        CREATE TABLE student (id INTEGER PRIMARY KEY, name TEXT);
        CREATE TABLE enrollment (student_id INTEGER REFERENCES student(id), status TEXT);
    """,
    "university": """
        CREATE TABLE department (dept_id INTEGER PRIMARY KEY, dept_name TEXT, building TEXT, budget INTEGER);
        CREATE TABLE instructor (id INTEGER PRIMARY KEY, name TEXT, dept_id INTEGER REFERENCES department(dept_id),
                                 salary INTEGER, hire_year INTEGER);
        CREATE TABLE advisor (id INTEGER PRIMARY KEY, name TEXT, dept_id INTEGER REFERENCES department(dept_id),
                              salary INTEGER, hire_year INTEGER);
        CREATE TABLE course (course_id INTEGER PRIMARY KEY, title TEXT, dept_id INTEGER REFERENCES department(dept_id),
                             credits INTEGER);
        CREATE TABLE teaches (instructor_id INTEGER REFERENCES instructor(id),
                              course_id INTEGER REFERENCES course(course_id), semester TEXT, year INTEGER);
    """,
    "retail": """
        CREATE TABLE customer (customer_id INTEGER PRIMARY KEY, name TEXT, city TEXT, segment TEXT);
        CREATE TABLE supplier (supplier_id INTEGER PRIMARY KEY, name TEXT, city TEXT);
        CREATE TABLE product (product_id INTEGER PRIMARY KEY, name TEXT, category TEXT, price REAL,
                              supplier_id INTEGER REFERENCES supplier(supplier_id));
        CREATE TABLE orders (order_id INTEGER PRIMARY KEY, customer_id INTEGER REFERENCES customer(customer_id),
                             order_date TEXT, status TEXT);
        CREATE TABLE order_item (order_id INTEGER REFERENCES orders(order_id),
                                 product_id INTEGER REFERENCES product(product_id), quantity INTEGER);
    """,
    "library": """
        CREATE TABLE author (author_id INTEGER PRIMARY KEY, name TEXT, country TEXT, birth_year INTEGER);
        CREATE TABLE book (book_id INTEGER PRIMARY KEY, title TEXT, author_id INTEGER REFERENCES author(author_id),
                           genre TEXT, published_year INTEGER, pages INTEGER);
        CREATE TABLE magazine (magazine_id INTEGER PRIMARY KEY, title TEXT, genre TEXT, published_year INTEGER);
        CREATE TABLE member (member_id INTEGER PRIMARY KEY, name TEXT, joined_year INTEGER, tier TEXT);
        CREATE TABLE loan (loan_id INTEGER PRIMARY KEY, book_id INTEGER REFERENCES book(book_id),
                           member_id INTEGER REFERENCES member(member_id), loan_date TEXT, returned INTEGER);
    """,
}

FIRST = ["Alice", "Bob", "Carol", "Dan", "Eve", "Frank", "Grace", "Heidi", "Ivan", "Judy",
         "Mallory", "Niaj", "Olivia", "Peggy", "Rupert", "Sybil", "Trent", "Uma", "Victor", "Wendy"]
LAST = ["Smith", "Jones", "Brown", "Lee", "Garcia", "Khan", "Novak", "Rossi", "Silva", "Tanaka"]


def _names(rng: random.Random, n: int) -> list[str]:
    pool = [f"{f} {l}" for f in FIRST for l in LAST]
    return rng.sample(pool, n)


def _fill_school(conn: sqlite3.Connection, rng: random.Random) -> None:
    students = ["Alice", "Bob", "Carol", "Dan", "Eve"]
    conn.executemany("INSERT INTO student VALUES (?, ?)", list(enumerate(students, 1)))
    conn.executemany("INSERT INTO enrollment VALUES (?, ?)",
                     [(1, "Completed"), (2, "Active"), (3, "Withdrawn"), (4, "Active"),
                      (5, "Withdrawn"), (2, "Withdrawn")])


def _fill_university(conn: sqlite3.Connection, rng: random.Random) -> None:
    depts = [(1, "Physics", "Watson", 70000), (2, "Biology", "Painter", 90000),
             (3, "History", "Taylor", 50000), (4, "Music", "Packard", 80000),
             (5, "Finance", "Painter", 120000)]
    conn.executemany("INSERT INTO department VALUES (?, ?, ?, ?)", depts)
    people = _names(rng, 26)
    for i, name in enumerate(people[:14], 1):
        conn.execute("INSERT INTO instructor VALUES (?, ?, ?, ?, ?)",
                     (i, name, rng.randint(1, 5), rng.randrange(40000, 130000, 500), rng.randint(2005, 2022)))
    for i, name in enumerate(people[14:], 1):
        conn.execute("INSERT INTO advisor VALUES (?, ?, ?, ?, ?)",
                     (i, name, rng.randint(1, 5), rng.randrange(40000, 130000, 500), rng.randint(2005, 2022)))
    titles = ["Mechanics", "Optics", "Genetics", "Ecology", "Ancient Rome", "Modern Europe",
              "Harmony", "Jazz", "Accounting", "Investments", "Quantum Theory", "Botany"]
    dept_of = [1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 1, 2]
    for i, (t, d) in enumerate(zip(titles, dept_of), 101):
        conn.execute("INSERT INTO course VALUES (?, ?, ?, ?)", (i, t, d, rng.choice([2, 3, 4])))
    for _ in range(30):
        conn.execute("INSERT INTO teaches VALUES (?, ?, ?, ?)",
                     (rng.randint(1, 14), rng.randint(101, 112), rng.choice(["Fall", "Spring"]),
                      rng.randint(2019, 2023)))


def _fill_retail(conn: sqlite3.Connection, rng: random.Random) -> None:
    cities = ["Austin", "Boston", "Chicago", "Denver", "Seattle"]
    for i, name in enumerate(_names(rng, 18), 1):
        conn.execute("INSERT INTO customer VALUES (?, ?, ?, ?)",
                     (i, name, rng.choice(cities), rng.choice(["Consumer", "Corporate", "Home Office"])))
    suppliers = [(1, "Acme Corp", "Austin"), (2, "Globex", "Boston"), (3, "Initech", "Denver"),
                 (4, "Umbrella", "Seattle")]
    conn.executemany("INSERT INTO supplier VALUES (?, ?, ?)", suppliers)
    products = [("Laptop", "Electronics", 899.0), ("Phone", "Electronics", 599.0),
                ("Desk", "Furniture", 250.0), ("Chair", "Furniture", 120.0),
                ("Pen", "Office Supplies", 2.5), ("Notebook", "Office Supplies", 4.0),
                ("Monitor", "Electronics", 199.0), ("Lamp", "Furniture", 45.0),
                ("Stapler", "Office Supplies", 12.0), ("Tablet", "Electronics", 329.0)]
    for i, (n, c, p) in enumerate(products, 1):
        conn.execute("INSERT INTO product VALUES (?, ?, ?, ?, ?)", (i, n, c, p, rng.randint(1, 4)))
    for i in range(1, 31):
        month, day = rng.randint(1, 12), rng.randint(1, 28)
        conn.execute("INSERT INTO orders VALUES (?, ?, ?, ?)",
                     (i, rng.randint(1, 18), f"{rng.choice([2022, 2023])}-{month:02d}-{day:02d}",
                      rng.choice(["Shipped", "Pending", "Cancelled", "Delivered"])))
    for order_id in range(1, 31):
        for product_id in rng.sample(range(1, 11), rng.randint(1, 3)):
            conn.execute("INSERT INTO order_item VALUES (?, ?, ?)",
                         (order_id, product_id, rng.randint(1, 5)))


def _fill_library(conn: sqlite3.Connection, rng: random.Random) -> None:
    authors = [(1, "Ursula Le Guin", "USA", 1929), (2, "Chinua Achebe", "Nigeria", 1930),
               (3, "Haruki Murakami", "Japan", 1949), (4, "Italo Calvino", "Italy", 1923),
               (5, "Toni Morrison", "USA", 1931), (6, "Jorge Luis Borges", "Argentina", 1899)]
    conn.executemany("INSERT INTO author VALUES (?, ?, ?, ?)", authors)
    genres = ["Fantasy", "Fiction", "Science Fiction", "Poetry", "Mystery"]
    for i in range(1, 25):
        conn.execute("INSERT INTO book VALUES (?, ?, ?, ?, ?, ?)",
                     (i, f"Book {i:02d}", rng.randint(1, 6), rng.choice(genres),
                      rng.randint(1950, 2020), rng.randint(120, 640)))
    for i in range(1, 9):
        conn.execute("INSERT INTO magazine VALUES (?, ?, ?, ?)",
                     (i, f"Issue {i}", rng.choice(genres), rng.randint(1990, 2020)))
    for i, name in enumerate(_names(rng, 15), 1):
        conn.execute("INSERT INTO member VALUES (?, ?, ?, ?)",
                     (i, name, rng.randint(2010, 2023), rng.choice(["Basic", "Premium"])))
    for i in range(1, 41):
        conn.execute("INSERT INTO loan VALUES (?, ?, ?, ?, ?)",
                     (i, rng.randint(1, 24), rng.randint(1, 15),
                      f"2023-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}", rng.randint(0, 1)))


FILLERS = {"school": _fill_school, "university": _fill_university,
           "retail": _fill_retail, "library": _fill_library}

# (db_id, question, gold SQL, predicted SQL or None for "same as gold", annotated labels)
CORPUS = [
    ("school", "Find the names of students who have completed the Database course.",
     "SELECT s.name FROM student s JOIN enrollment e ON s.id = e.student_id WHERE e.status = 'Completed'",
     "SELECT s.name FROM student s JOIN enrollment e ON s.id = e.student_id WHERE e.status = 'Complete'",
     ["value_error"]),
    ("school", "List the names of all students.", "SELECT name FROM student", None, None),
    ("school", "How many enrollments are active?",
     "SELECT COUNT(*) FROM enrollment WHERE status = 'Active'", None, None),
    ("school", "List the student names in descending alphabetical order.",
     "SELECT name FROM student ORDER BY name DESC", None, None),
    ("school", "Show each enrollment status with the number of enrollments.",
     "SELECT status, COUNT(*) FROM enrollment GROUP BY status",
     "SELECT status, COUNT(*) FROM enrollment", ["clause_error"]),
    ("school", "Which students have withdrawn from a course?",
     "SELECT DISTINCT s.name FROM student s JOIN enrollment e ON s.id = e.student_id WHERE e.status = 'Withdrawn'",
     None, None),
    ("school", "List the distinct enrollment statuses.",
     "SELECT DISTINCT status FROM enrollment",
     "SELECT status FROM enrollment", ["modifier_error"]),
    ("school", "Find students with no enrollment that is active.",
     "SELECT name FROM student WHERE id NOT IN (SELECT student_id FROM enrollment WHERE status = 'Active')",
     None, None),
    ("school", "How many students are there?", "SELECT COUNT(*) FROM student", None, None),
    ("school", "List each student's name and enrollment status.",
     "SELECT s.name, e.status FROM student s JOIN enrollment e ON s.id = e.student_id",
     "SELECT s.name FROM student s JOIN enrollment e ON s.id = e.student_id", ["attribute_missing"]),
    ("university", "List the names of instructors in the Physics department.",
     "SELECT i.name FROM instructor i JOIN department d ON i.dept_id = d.dept_id WHERE d.dept_name = 'Physics'",
     "SELECT i.name FROM instructor i JOIN department d ON i.dept_id = d.dept_id WHERE d.dept_name = 'physics'",
     ["value_error"]),
    ("university", "What is the highest instructor salary?", "SELECT MAX(salary) FROM instructor",
     "SELECT MIN(salary) FROM instructor", ["function_error"]),
    ("university", "Show the average salary of instructors per department id.",
     "SELECT dept_id, AVG(salary) FROM instructor GROUP BY dept_id", None, None),
    ("university", "Which departments have a budget over 75000?",
     "SELECT dept_name FROM department WHERE budget > 75000",
     "SELECT dept_name FROM department WHERE budget < 75000", ["condition_error"]),
    ("university", "List course titles with their department names.",
     "SELECT c.title, d.dept_name FROM course c JOIN department d ON c.dept_id = d.dept_id", None, None),
    ("university", "How many courses does each department offer? Show department names.",
     "SELECT d.dept_name, COUNT(*) FROM department d JOIN course c ON d.dept_id = c.dept_id GROUP BY d.dept_name",
     None, None),
    ("university", "Which buildings host departments?", "SELECT DISTINCT building FROM department", None, None),
    ("university", "List the three best paid instructors.",
     "SELECT name FROM instructor ORDER BY salary DESC LIMIT 3",
     "SELECT name FROM instructor ORDER BY salary ASC LIMIT 3", ["modifier_error"]),
    ("university", "Find instructors hired after 2015 in department 1.",
     "SELECT name FROM instructor WHERE hire_year > 2015 AND dept_id = 1",
     "SELECT name FROM instructor WHERE hire_year > 2015", ["condition_missing"]),
    ("university", "Which courses have 4 credits?", "SELECT title FROM course WHERE credits = 4", None, None),
    ("university", "Show the names of instructors who taught in Fall 2021.",
     "SELECT DISTINCT i.name FROM instructor i JOIN teaches t ON i.id = t.instructor_id "
     "WHERE t.semester = 'Fall' AND t.year = 2021", None, None),
    ("university", "Which departments have more than two courses?",
     "SELECT dept_id FROM course GROUP BY dept_id HAVING COUNT(*) > 2", None, None),
    ("university", "What is the total budget of departments in the Painter building?",
     "SELECT SUM(budget) FROM department WHERE building = 'Painter'",
     "SELECT AVG(budget) FROM department WHERE building = 'Painter'", ["function_error"]),
    ("university", "List instructor names and salaries of the Biology department.",
     "SELECT i.name, i.salary FROM instructor i JOIN department d ON i.dept_id = d.dept_id "
     "WHERE d.dept_name = 'Biology'",
     "SELECT i.name, i.salary, d.building FROM instructor i JOIN department d ON i.dept_id = d.dept_id "
     "WHERE d.dept_name = 'Biology'", ["attribute_redundancy"]),
    ("university", "Find the titles of courses taught in 2022.",
     "SELECT DISTINCT c.title FROM course c JOIN teaches t ON c.course_id = t.course_id WHERE t.year = 2022",
     None, None),
    ("university", "Which instructors earn more than the average instructor salary?",
     "SELECT name FROM instructor WHERE salary > (SELECT AVG(salary) FROM instructor)", None, None),
    ("university", "List advisor names hired before 2010.",
     "SELECT name FROM advisor WHERE hire_year < 2010",
     "SELECT name FROM instructor WHERE hire_year < 2010", ["table_mismatch"]),
    ("university", "How many instructors are there in each hire year, newest first?",
     "SELECT hire_year, COUNT(*) FROM instructor GROUP BY hire_year ORDER BY hire_year DESC", None, None),
    ("university", "List department names that have no courses with 2 credits.",
     "SELECT dept_name FROM department WHERE dept_id NOT IN (SELECT dept_id FROM course WHERE credits = 2)",
     None, None),
    ("university", "Show course titles in the History department ordered by title.",
     "SELECT c.title FROM course c JOIN department d ON c.dept_id = d.dept_id "
     "WHERE d.dept_name = 'History' ORDER BY c.title", None, None),
    ("retail", "List the names of customers from Boston.",
     "SELECT name FROM customer WHERE city = 'Boston'",
     "SELECT name FROM customer WHERE city = 'boston'", ["value_error"]),
    ("retail", "How many orders have been shipped?",
     "SELECT COUNT(*) FROM orders WHERE status = 'Shipped'", None, None),
    ("retail", "What is the most expensive product price?", "SELECT MAX(price) FROM product", None, None),
    ("retail", "List products in the Furniture category cheaper than 200.",
     "SELECT name FROM product WHERE category = 'Furniture' AND price < 200",
     "SELECT name FROM product WHERE category = 'Furniture'", ["condition_missing"]),
    ("retail", "Show each product category with its average price.",
     "SELECT category, AVG(price) FROM product GROUP BY category", None, None),
    ("retail", "List customer names with the dates of their orders.",
     "SELECT c.name, o.order_date FROM customer c JOIN orders o ON c.customer_id = o.customer_id",
     "SELECT c.name FROM customer c JOIN orders o ON c.customer_id = o.customer_id", ["attribute_missing"]),
    ("retail", "Which cities do customers live in?", "SELECT DISTINCT city FROM customer", None, None),
    ("retail", "Find the total quantity ordered for each product name.",
     "SELECT p.name, SUM(oi.quantity) FROM product p JOIN order_item oi ON p.product_id = oi.product_id "
     "GROUP BY p.name", None, None),
    ("retail", "List the five cheapest products.",
     "SELECT name, price FROM product ORDER BY price LIMIT 5",
     "SELECT name, price FROM product LIMIT 5", ["clause_error"]),
    ("retail", "Which suppliers are based in Austin?",
     "SELECT name FROM supplier WHERE city = 'Austin'",
     "SELECT name FROM customer WHERE city = 'Austin'", ["table_mismatch"]),
    ("retail", "Count customers in each segment.",
     "SELECT segment, COUNT(*) FROM customer GROUP BY segment", None, None),
    ("retail", "List the names of products supplied by Globex.",
     "SELECT p.name FROM product p JOIN supplier s ON p.supplier_id = s.supplier_id WHERE s.name = 'Globex'",
     None, None),
    ("retail", "Which orders were placed in 2023?",
     "SELECT order_id FROM orders WHERE order_date LIKE '2023%'", None, None),
    ("retail", "Find customers who placed a cancelled order.",
     "SELECT DISTINCT c.name FROM customer c JOIN orders o ON c.customer_id = o.customer_id "
     "WHERE o.status = 'Cancelled'",
     "SELECT DISTINCT c.name FROM customer c JOIN orders o ON c.customer_id = o.customer_id "
     "WHERE o.status = 'Canceled'", ["value_error"]),
    ("retail", "What is the average price of Electronics products?",
     "SELECT AVG(price) FROM product WHERE category = 'Electronics'", None, None),
    ("retail", "Which products cost between 10 and 300?",
     "SELECT name FROM product WHERE price BETWEEN 10 AND 300", None, None),
    ("retail", "How many products does each supplier provide? Show supplier names.",
     "SELECT s.name, COUNT(*) FROM supplier s JOIN product p ON s.supplier_id = p.supplier_id GROUP BY s.name",
     None, None),
    ("retail", "List the names of customers who never placed an order.",
     "SELECT name FROM customer WHERE customer_id NOT IN (SELECT customer_id FROM orders)", None, None),
    ("retail", "List names of Corporate customers ordered by name.",
     "SELECT name FROM customer WHERE segment = 'Corporate' ORDER BY name", None, None),
    ("retail", "Which order ids contain more than two products?",
     "SELECT order_id FROM order_item GROUP BY order_id HAVING COUNT(*) > 2", None, None),
    ("library", "List the titles of books written by authors from Japan.",
     "SELECT b.title FROM book b JOIN author a ON b.author_id = a.author_id WHERE a.country = 'Japan'",
     "SELECT b.title FROM book b JOIN author a ON b.author_id = a.author_id WHERE a.country = 'japan'",
     ["value_error"]),
    ("library", "How many books are there in each genre?",
     "SELECT genre, COUNT(*) FROM book GROUP BY genre", None, None),
    ("library", "What is the longest book page count?", "SELECT MAX(pages) FROM book", None, None),
    ("library", "Which members have the Premium tier?",
     "SELECT name FROM member WHERE tier = 'Premium'", None, None),
    ("library", "List authors born before 1930.",
     "SELECT name FROM author WHERE birth_year < 1930",
     "SELECT name FROM author WHERE birth_year <= 1930", ["condition_error"]),
    ("library", "List magazine titles published after 2000.",
     "SELECT title FROM magazine WHERE published_year > 2000",
     "SELECT title FROM book WHERE published_year > 2000", ["table_mismatch"]),
    ("library", "Show the names of members who borrowed a Fantasy book.",
     "SELECT DISTINCT m.name FROM member m JOIN loan l ON m.member_id = l.member_id "
     "JOIN book b ON l.book_id = b.book_id WHERE b.genre = 'Fantasy'", None, None),
    ("library", "How many loans have not been returned?",
     "SELECT COUNT(*) FROM loan WHERE returned = 0", None, None),
    ("library", "List book titles with their author names.",
     "SELECT b.title, a.name FROM book b JOIN author a ON b.author_id = a.author_id", None, None),
    ("library", "What is the average number of pages per genre?",
     "SELECT genre, AVG(pages) FROM book GROUP BY genre",
     "SELECT genre, SUM(pages) FROM book GROUP BY genre", ["function_error"]),
    ("library", "List the titles of the five newest books.",
     "SELECT title FROM book ORDER BY published_year DESC LIMIT 5", None, None),
    ("library", "Which countries do authors come from?", "SELECT DISTINCT country FROM author", None, None),
    ("library", "List titles of Poetry books with more than 300 pages.",
     "SELECT title FROM book WHERE genre = 'Poetry' AND pages > 300", None, None),
    ("library", "Which authors have written more than four books? Show their names.",
     "SELECT a.name FROM author a JOIN book b ON a.author_id = b.author_id GROUP BY a.name HAVING COUNT(*) > 4",
     "SELECT a.name FROM author a JOIN book b ON a.author_id = b.author_id GROUP BY a.name", ["clause_error"]),
    ("library", "List member names who joined in 2020 or later ordered by joining year.",
     "SELECT name FROM member WHERE joined_year >= 2020 ORDER BY joined_year", None, None),
    ("library", "Find the titles of books that were never loaned.",
     "SELECT title FROM book WHERE book_id NOT IN (SELECT book_id FROM loan)", None, None),
    ("library", "List book titles of authors from the USA.",
     "SELECT b.title FROM book b JOIN author a ON b.author_id = a.author_id WHERE a.country = 'USA'",
     "SELECT b.title FROM book b JOIN author a ON b.author_id = a.author_id JOIN member m",
     ["condition_missing", "table_redundancy"]),
    ("library", "How many books were published in each year after 2010?",
     "SELECT published_year, COUNT(*) FROM book WHERE published_year > 2010 GROUP BY published_year",
     None, None),
    ("library", "Which members have borrowed books? Show distinct names.",
     "SELECT DISTINCT m.name FROM member m JOIN loan l ON m.member_id = l.member_id", None, None),
    ("library", "List author names and countries ordered by birth year.",
     "SELECT name, country FROM author ORDER BY birth_year",
     "SELECT name FROM author ORDER BY birth_year", ["attribute_missing"]),
]


def build_databases(root) -> dict[str, Path]:
    """Create (or recreate) the demo databases under ``root``; returns db_id -> path."""
    root = Path(root)
    paths = {}
    for db_id, ddl in SCHEMAS.items():
        folder = root / db_id
        folder.mkdir(parents=True, exist_ok=True)
        path = folder / f"{db_id}.sqlite"
        if path.exists():
            path.unlink()
        conn = sqlite3.connect(path)
        try:
            conn.executescript(ddl)
            FILLERS[db_id](conn, random.Random(f"demo:{db_id}"))
            conn.commit()
        finally:
            conn.close()
        paths[db_id] = path
    return paths


def corpus_rows() -> list[dict]:
    rows = []
    for i, (db_id, question, gold, pred, labels) in enumerate(CORPUS):
        row = {"question_id": f"q{i:03d}", "db_id": db_id, "question": question,
               "gold_sql": gold, "predicted_sql": pred if pred is not None else gold,
               "pred_correct": pred is None}
        if labels:
            row["annotation"] = {"labels": labels}
        rows.append(row)
    return rows


def build_demo(root) -> list[dict]:
    """Write databases under ``root/databases`` and ``root/corpus.jsonl``."""
    root = Path(root)
    build_databases(root / "databases")
    rows = corpus_rows()
    with (root / "corpus.jsonl").open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return rows
